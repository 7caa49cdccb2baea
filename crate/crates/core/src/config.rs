//! Flat `key = value` run configuration.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::cats::SwapMode;
use crate::error::{cfg_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Cats,
    Catspp,
}

impl FromStr for ModelKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cats" => Ok(ModelKind::Cats),
            "catspp" => Ok(ModelKind::Catspp),
            _ => Err(cfg_err!("unknown model `{s}` (expected cats or catspp)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Cats => "cats",
            ModelKind::Catspp => "catspp",
        })
    }
}

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model", "cats", "aggregator: cats | catspp"),
    ("mode", "default", "swap mode: serial | parallel | both | default (cats: serial, catspp: parallel)"),
    ("seed", "0", "seed for parameter init and training order"),
    ("grid.h", "16", "flow grid rows"),
    ("grid.w", "16", "flow grid columns"),
    ("beta", "20", "soft-argmax inverse temperature"),
    ("alphas", "0.05,0.1,0.15", "PCK thresholds"),
    ("threads", "1", "evaluation threads (pair-level)"),
    ("cats.levels", "2,3,4", "backbone levels stacked by cats"),
    ("cats.n_encoders", "1", "intra+inter encoder repeats"),
    ("cats.n_heads", "8", "attention heads"),
    ("cats.p", "128", "appearance embedding width"),
    ("cats.ffn_ratio", "2", "feed-forward expansion"),
    ("catspp.layers", "3,4,5", "pyramid layers"),
    ("catspp.d", "16", "embedded channels"),
    ("catspp.embed.kernel", "3", "embedding conv4d kernel extent"),
    ("catspp.embed.stride", "2", "stride of each embedding stage"),
    ("catspp.s", "2", "query/key projection stride"),
    ("catspp.proj_kernel", "3", "query/key/value conv4d kernel extent"),
    ("catspp.attn_dim", "128", "query/key width"),
    ("catspp.ffn_ratio", "2", "volumetric feed-forward expansion"),
    ("catspp.ffn_kernel", "3", "volumetric feed-forward kernel extent"),
    ("catspp.n_encoders", "1", "efficient blocks per layer"),
    ("catspp.p", "128", "appearance embedding width"),
    ("train.lr_aggregator", "3e-5", "aggregator learning rate"),
    ("train.lr_backbone", "3e-6", "backbone learning rate"),
    ("train.weight_decay", "0.05", "decoupled weight decay"),
    ("train.steps", "1000", "optimizer steps"),
    ("train.batch_size", "1", "pairs per step"),
    ("train.decay_floor", "0.1", "final learning-rate fraction of the cosine schedule"),
    ("data.pairs", "200", "pairs written by gen-data"),
    ("data.warp_magnitude", "1", "warp strength in [0, 1]"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CatsKeys {
    pub levels: Vec<usize>,
    pub n_encoders: usize,
    pub n_heads: usize,
    pub p: usize,
    pub ffn_ratio: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatsppKeys {
    pub layers: Vec<usize>,
    pub d: usize,
    pub embed_kernel: usize,
    pub embed_strides: Vec<usize>,
    pub s: usize,
    pub proj_kernel: usize,
    pub attn_dim: usize,
    pub ffn_ratio: usize,
    pub ffn_kernel: usize,
    pub n_encoders: usize,
    pub p: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_aggregator: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub decay_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub mode: Option<SwapMode>,
    pub seed: u64,
    pub grid: (usize, usize),
    pub beta: f64,
    pub alphas: Vec<f64>,
    pub threads: usize,
    pub cats: CatsKeys,
    pub catspp: CatsppKeys,
    pub train: TrainConfig,
    pub pairs: usize,
    pub warp_magnitude: f64,
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim().parse().map_err(|_| cfg_err!("bad value `{v}` for `{key}`"))
}

fn parse_list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    let items = v.split(',').map(|s| parse(key, s)).collect::<Result<Vec<V>>>()?;
    if items.is_empty() {
        return Err(cfg_err!("`{key}` needs at least one value"));
    }
    Ok(items)
}

fn join<V: Display>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            model: ModelKind::Cats,
            mode: None,
            seed: 0,
            grid: (0, 0),
            beta: 0.0,
            alphas: Vec::new(),
            threads: 1,
            cats: CatsKeys { levels: Vec::new(), n_encoders: 0, n_heads: 0, p: 0, ffn_ratio: 0 },
            catspp: CatsppKeys {
                layers: Vec::new(),
                d: 0,
                embed_kernel: 0,
                embed_strides: Vec::new(),
                s: 0,
                proj_kernel: 0,
                attn_dim: 0,
                ffn_ratio: 0,
                ffn_kernel: 0,
                n_encoders: 0,
                p: 0,
            },
            train: TrainConfig {
                lr_aggregator: 0.0,
                lr_backbone: 0.0,
                weight_decay: 0.0,
                steps: 0,
                batch_size: 0,
                decay_floor: 0.0,
            },
            pairs: 0,
            warp_magnitude: 0.0,
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("defaults parse");
        }
        cfg
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model" => self.model = v.trim().parse()?,
            "mode" => self.mode = if v.trim() == "default" { None } else { Some(v.trim().parse()?) },
            "seed" => self.seed = parse(key, v)?,
            "grid.h" => self.grid.0 = parse(key, v)?,
            "grid.w" => self.grid.1 = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "alphas" => self.alphas = parse_list(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "cats.levels" => self.cats.levels = parse_list(key, v)?,
            "cats.n_encoders" => self.cats.n_encoders = parse(key, v)?,
            "cats.n_heads" => self.cats.n_heads = parse(key, v)?,
            "cats.p" => self.cats.p = parse(key, v)?,
            "cats.ffn_ratio" => self.cats.ffn_ratio = parse(key, v)?,
            "catspp.layers" => self.catspp.layers = parse_list(key, v)?,
            "catspp.d" => self.catspp.d = parse(key, v)?,
            "catspp.embed.kernel" => self.catspp.embed_kernel = parse(key, v)?,
            "catspp.embed.stride" => self.catspp.embed_strides = parse_list(key, v)?,
            "catspp.s" => self.catspp.s = parse(key, v)?,
            "catspp.proj_kernel" => self.catspp.proj_kernel = parse(key, v)?,
            "catspp.attn_dim" => self.catspp.attn_dim = parse(key, v)?,
            "catspp.ffn_ratio" => self.catspp.ffn_ratio = parse(key, v)?,
            "catspp.ffn_kernel" => self.catspp.ffn_kernel = parse(key, v)?,
            "catspp.n_encoders" => self.catspp.n_encoders = parse(key, v)?,
            "catspp.p" => self.catspp.p = parse(key, v)?,
            "train.lr_aggregator" => self.train.lr_aggregator = parse(key, v)?,
            "train.lr_backbone" => self.train.lr_backbone = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.decay_floor" => self.train.decay_floor = parse(key, v)?,
            "data.pairs" => self.pairs = parse(key, v)?,
            "data.warp_magnitude" => self.warp_magnitude = parse(key, v)?,
            _ => return Err(cfg_err!("unknown config key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model" => self.model.to_string(),
            "mode" => self.resolved_mode().to_string(),
            "seed" => self.seed.to_string(),
            "grid.h" => self.grid.0.to_string(),
            "grid.w" => self.grid.1.to_string(),
            "beta" => self.beta.to_string(),
            "alphas" => join(&self.alphas),
            "threads" => self.threads.to_string(),
            "cats.levels" => join(&self.cats.levels),
            "cats.n_encoders" => self.cats.n_encoders.to_string(),
            "cats.n_heads" => self.cats.n_heads.to_string(),
            "cats.p" => self.cats.p.to_string(),
            "cats.ffn_ratio" => self.cats.ffn_ratio.to_string(),
            "catspp.layers" => join(&self.catspp.layers),
            "catspp.d" => self.catspp.d.to_string(),
            "catspp.embed.kernel" => self.catspp.embed_kernel.to_string(),
            "catspp.embed.stride" => join(&self.catspp.embed_strides),
            "catspp.s" => self.catspp.s.to_string(),
            "catspp.proj_kernel" => self.catspp.proj_kernel.to_string(),
            "catspp.attn_dim" => self.catspp.attn_dim.to_string(),
            "catspp.ffn_ratio" => self.catspp.ffn_ratio.to_string(),
            "catspp.ffn_kernel" => self.catspp.ffn_kernel.to_string(),
            "catspp.n_encoders" => self.catspp.n_encoders.to_string(),
            "catspp.p" => self.catspp.p.to_string(),
            "train.lr_aggregator" => self.train.lr_aggregator.to_string(),
            "train.lr_backbone" => self.train.lr_backbone.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.decay_floor" => self.train.decay_floor.to_string(),
            "data.pairs" => self.pairs.to_string(),
            "data.warp_magnitude" => self.warp_magnitude.to_string(),
            _ => return None,
        })
    }

    /// The swap mode after applying the per-model default.
    pub fn resolved_mode(&self) -> SwapMode {
        self.mode.unwrap_or(match self.model {
            ModelKind::Cats => SwapMode::Serial,
            ModelKind::Catspp => SwapMode::Parallel,
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in crate::text::content_lines(text) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err!("line {n}: expected `key = value`, got `{line}`"))?;
            self.set(k.trim(), v.trim()).map_err(|e| cfg_err!("line {n}: {e}"))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides such as those given on a command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| cfg_err!("override `{o}` is not key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// The fully resolved config, one `key = value` per line in table order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k).expect("known key")));
        }
        s
    }
}
