//! Decoupled-weight-decay Adam with two learning-rate groups, cosine decay
//! and the single-threaded training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::PairRecord;
use crate::error::{arg_err, Error, Result};
use crate::flow::aepe_in_graph;
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Parameters under this prefix use the backbone learning rate.
pub const BACKBONE_PREFIX: &str = "backbone.";

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub moments: BTreeMap<String, Moments>,
}

/// Decay applies to weight matrices and kernels, not to biases, norms or
/// positional embeddings.
fn decays(name: &str, value: &Tensor<f32>) -> bool {
    value.rank() >= 2 && !name.ends_with(".pos")
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, weight_decay: f64) -> Self {
        let moments = store
            .iter()
            .map(|(n, p)| {
                let z = Tensor::zeros(p.value.shape());
                (n.clone(), Moments { m: z.clone(), v: z })
            })
            .collect();
        AdamW { weight_decay, moments }
    }

    /// One update with step number `t` (1-based) and per-parameter learning
    /// rate `lr(name)`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, t: u64, lr: impl Fn(&str) -> f64) -> Result<()> {
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for (name, p) in store.iter_mut() {
            let mo = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("optimizer has no moments for `{name}`")))?;
            let rate = lr(name);
            let decay = if decays(name, &p.value) { (rate * self.weight_decay) as f32 } else { 0.0 };
            let (b1, b2) = (BETA1 as f32, BETA2 as f32);
            let (step, c1, c2, eps) = (rate as f32, bc1 as f32, bc2 as f32, EPS as f32);
            let (w, g) = (p.value.data_mut(), p.grad.data());
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= step * mh / (vh.sqrt() + eps) + decay * w[i];
            }
        }
        Ok(())
    }
}

/// Cosine decay from 1 to `floor` over `total` steps.
pub fn lr_factor(step: u64, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let frac = (step as f64 / (total - 1) as f64).min(1.0);
    floor + (1.0 - floor) * 0.5 * (1.0 + (PI * frac).cos())
}

/// Forward + masked AEPE + backward over `pairs`; gradients (averaged over
/// the pairs) are left in `store`. Returns the mean loss.
pub fn compute_gradients(model: &Model, store: &mut ParamStore<f32>, pairs: &[&PairRecord]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(arg_err!("empty batch"));
    }
    store.zero_grad();
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for pair in pairs {
        let mut g = Graph::<f32>::train();
        let diag = |g: &Graph<f32>, e: Error| match (e, g.first_non_finite()) {
            (Error::Numeric(msg), Some((v, op))) => {
                Error::Numeric(format!("{msg}; first non-finite value from op `{op}` (node {})", v.index()))
            }
            (e, _) => e,
        };
        let fwd = match model.forward(&mut g, store, &pair.source, &pair.target) {
            Ok(f) => f,
            Err(e) => return Err(diag(&g, e)),
        };
        let gt = g.constant(pair.flow.grid.cast());
        let mask = pair.valid_mask();
        let loss = aepe_in_graph(&mut g, fwd.flow, gt, Some(&mask))?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(diag(&g, Error::Numeric(format!("loss is {value}"))));
        }
        let loss = g.scale(loss, scale);
        let grads = g.backward(loss)?;
        store.accumulate(&g, &grads)?;
        total += value;
    }
    Ok(total * scale)
}

/// Optimizer state plus the sampling RNG; everything needed to resume.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub opt: AdamW,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, store: &ParamStore<f32>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep batch sampling independent of the init stream
        rng.set_stream(1);
        let opt = AdamW::new(store, cfg.weight_decay);
        Trainer { cfg, step: 0, rng, opt }
    }

    pub fn learning_rate(&self, name: &str) -> f64 {
        let base = if name.starts_with(BACKBONE_PREFIX) { self.cfg.lr_backbone } else { self.cfg.lr_aggregator };
        base * lr_factor(self.step, self.cfg.steps, self.cfg.decay_floor)
    }

    /// Samples a batch, computes gradients and updates parameters. Returns
    /// the pre-update loss.
    pub fn train_step(&mut self, model: &Model, store: &mut ParamStore<f32>, data: &[PairRecord]) -> Result<f64> {
        if data.is_empty() {
            return Err(arg_err!("no training pairs"));
        }
        let batch: Vec<&PairRecord> =
            (0..self.cfg.batch_size.max(1)).map(|_| &data[self.rng.gen_range(0..data.len())]).collect();
        let loss = compute_gradients(model, store, &batch)?;
        let lrs: BTreeMap<String, f64> = store.names().map(|n| (n.clone(), self.learning_rate(n))).collect();
        self.opt.step(store, self.step + 1, |n| lrs[n])?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs until `cfg.steps` steps have been taken, calling `log` after each.
    pub fn run(
        &mut self,
        model: &Model,
        store: &mut ParamStore<f32>,
        data: &[PairRecord],
        mut log: impl FnMut(u64, f64),
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while (self.step as usize) < self.cfg.steps {
            let l = self.train_step(model, store, data)?;
            log(self.step, l);
            losses.push(l);
        }
        Ok(losses)
    }
}
