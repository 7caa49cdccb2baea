//! Training checkpoints.
//!
//! Layout (little-endian): magic `CATK`, u32 version, u32-length config
//! text, u64 step, RNG state (32-byte seed, u64 stream, u128 word
//! position), u32 parameter count, then per parameter: u32-length name and
//! three tensor records (value, first moment, second moment).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{read_tensor, write_tensor, AnyTensor, Tensor};
use crate::train::{Moments, Trainer};

const MAGIC: &[u8; 4] = b"CATK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub value: Tensor<f32>,
    pub moments: Moments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn capture(config: &str, store: &ParamStore<f32>, trainer: &Trainer) -> Result<Self> {
        let params = store
            .iter()
            .map(|(name, p)| {
                let moments = trainer
                    .opt
                    .moments
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::State(format!("optimizer has no moments for `{name}`")))?;
                Ok(ParamRecord { name: name.clone(), value: p.value.clone(), moments })
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint { config: config.to_string(), step: trainer.step, rng: RngState::capture(&trainer.rng), params })
    }

    /// Copies parameter values into `store`, which must hold exactly the
    /// same names and shapes.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for rec in &self.params {
            let p = store
                .get_mut(&rec.name)
                .map_err(|_| Error::Load(format!("checkpoint has unknown parameter `{}`", rec.name)))?;
            if p.value.shape() != rec.value.shape() {
                return Err(Error::Load(format!(
                    "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
                    rec.name,
                    rec.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = rec.value.clone();
        }
        if store.len() != self.params.len() {
            let missing: Vec<_> = store.names().filter(|n| !self.params.iter().any(|r| &r.name == *n)).collect();
            return Err(Error::Load(format!("checkpoint lacks parameters {:?}", missing)));
        }
        Ok(())
    }

    /// Restores parameters, optimizer moments, step counter and RNG.
    pub fn restore(&self, store: &mut ParamStore<f32>, trainer: &mut Trainer) -> Result<()> {
        self.restore_params(store)?;
        trainer.opt.moments = self.params.iter().map(|r| (r.name.clone(), r.moments.clone())).collect();
        trainer.step = self.step;
        trainer.rng = self.rng.restore();
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.config)?;
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&u32::try_from(self.params.len()).map_err(|_| Error::Argument("too many parameters".into()))?.to_le_bytes());
        for r in &self.params {
            put_str(&mut b, &r.name)?;
            write_tensor(&mut b, &r.value)?;
            write_tensor(&mut b, &r.moments.m)?;
            write_tensor(&mut b, &r.moments.v)?;
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic: [u8; 4] = take(&mut r)?;
        if &magic != MAGIC {
            return Err(Error::Load("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::Load(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let config = get_str(&mut r)?;
        let step = u64::from_le_bytes(take(&mut r)?);
        let rng = RngState {
            seed: take(&mut r)?,
            stream: u64::from_le_bytes(take(&mut r)?),
            word_pos: u128::from_le_bytes(take(&mut r)?),
        };
        let n = u32::from_le_bytes(take(&mut r)?);
        let mut params = Vec::new();
        for _ in 0..n {
            let name = get_str(&mut r)?;
            let mut f32_tensor = || -> Result<Tensor<f32>> {
                match read_tensor(&mut r)? {
                    AnyTensor::F32(t) => Ok(t),
                    AnyTensor::F64(_) => Err(Error::Load(format!("parameter `{name}` is not f32"))),
                }
            };
            let value = f32_tensor()?;
            let m = f32_tensor()?;
            let v = f32_tensor()?;
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(Error::Load(format!("moment shapes of `{name}` do not match its value")));
            }
            params.push(ParamRecord { name, value, moments: Moments { m, v } });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Load("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config, step, rng, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u32::try_from(s.len()).map_err(|_| Error::Argument("string too long".into()))?;
    b.extend_from_slice(&n.to_le_bytes());
    b.extend_from_slice(s.as_bytes());
    Ok(())
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| Error::Load("checkpoint is truncated".into()))?;
    Ok(buf)
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = u32::from_le_bytes(take(r)?) as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(Error::Load("checkpoint is truncated".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::Load("checkpoint is truncated".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Load("checkpoint string is not UTF-8".into()))
}
