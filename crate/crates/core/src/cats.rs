//! The standard transformer cost aggregator.
//!
//! Tokens are the positions of one image; each token carries that
//! position's correlation row at one level concatenated with a projected
//! appearance embedding. A shared transformer refines the stack, first
//! within each level (intra) and then across levels (inter).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::correlation::{swap_in_graph, CorrelationStack, FeatureMap, TokenAxis};
use crate::error::{arg_err, cfg_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, TransformerBlock};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// How the two orientations of the correlation map are processed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwapMode {
    /// Aggregate over target tokens, transpose, aggregate over source tokens.
    Serial,
    /// Aggregate both orientations independently and average.
    Parallel,
    /// A serial pass followed by a parallel pass.
    Both,
}

impl FromStr for SwapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(SwapMode::Serial),
            "parallel" => Ok(SwapMode::Parallel),
            "both" => Ok(SwapMode::Both),
            _ => Err(cfg_err!("unknown mode `{s}` (expected serial, parallel or both)")),
        }
    }
}

impl fmt::Display for SwapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwapMode::Serial => "serial",
            SwapMode::Parallel => "parallel",
            SwapMode::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatsConfig {
    pub n_encoders: usize,
    pub n_heads: usize,
    /// Appearance embedding width `p`.
    pub appearance_dim: usize,
    pub grid: (usize, usize),
    /// Channel count of each level's features; its length is `L`.
    pub feature_channels: Vec<usize>,
    pub mode: SwapMode,
    pub ffn_ratio: usize,
}

impl Default for CatsConfig {
    fn default() -> Self {
        CatsConfig {
            n_encoders: 1,
            n_heads: 8,
            appearance_dim: 128,
            grid: (16, 16),
            feature_channels: vec![16, 32, 32],
            mode: SwapMode::Serial,
            ffn_ratio: 2,
        }
    }
}

impl CatsConfig {
    pub fn hw(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn levels(&self) -> usize {
        self.feature_channels.len()
    }

    /// Token feature extent `hw + p`.
    pub fn token_dim(&self) -> usize {
        self.hw() + self.appearance_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_encoders == 0 || self.appearance_dim == 0 || self.feature_channels.is_empty() {
            return Err(cfg_err!("n_encoders, appearance_dim and the level list must be non-empty"));
        }
        if self.n_heads == 0 || self.token_dim() % self.n_heads != 0 {
            return Err(cfg_err!(
                "token extent {} (hw {} + p {}) is not divisible by {} heads",
                self.token_dim(),
                self.hw(),
                self.appearance_dim,
                self.n_heads
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    intra: TransformerBlock,
    inter: TransformerBlock,
}

#[derive(Clone, Debug)]
pub struct Cats {
    cfg: CatsConfig,
    appearance: Vec<Linear>,
    encoders: Vec<Encoder>,
    pos: String,
    proj_out: Linear,
}

pub const PREFIX: &str = "cats";

impl Cats {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: CatsConfig) -> Result<Self> {
        cfg.validate()?;
        let (hw, f, p) = (cfg.hw(), cfg.token_dim(), cfg.appearance_dim);
        let appearance = cfg
            .feature_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Linear::new(store, rng, &format!("{PREFIX}.app{l}"), c, p))
            .collect::<Result<_>>()?;
        let encoders = (0..cfg.n_encoders)
            .map(|e| {
                Ok(Encoder {
                    intra: TransformerBlock::new(store, rng, &format!("{PREFIX}.enc{e}.intra"), f, cfg.n_heads, cfg.ffn_ratio)?,
                    inter: TransformerBlock::new(store, rng, &format!("{PREFIX}.enc{e}.inter"), f, cfg.n_heads, cfg.ffn_ratio)?,
                })
            })
            .collect::<Result<_>>()?;
        let pos = format!("{PREFIX}.pos");
        store.insert_zeros(&pos, &[hw, f])?;
        // Starting from zero makes the untrained aggregator pass the raw
        // correlation through; random scores at this scale would saturate the
        // soft-argmax and leave almost no gradient.
        let proj_out = Linear::zeroed(store, &format!("{PREFIX}.proj_out"), f, hw)?;
        Ok(Cats { cfg, appearance, encoders, pos, proj_out })
    }

    pub fn config(&self) -> &CatsConfig {
        &self.cfg
    }

    /// `P^l(D^l)`: `[h, w, c_l] -> [hw, p]`.
    pub fn appearance<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, level: usize, d: Var) -> Result<Var> {
        let proj = self.appearance.get(level).ok_or_else(|| arg_err!("no appearance projection for level {level}"))?;
        let s = g.shape(d).to_vec();
        if s.len() != 3 || (s[0], s[1]) != self.cfg.grid || s[2] != proj.inp {
            return Err(dim_err!(
                "level {level} features {:?} do not match grid {:?} with {} channels",
                s,
                self.cfg.grid,
                proj.inp
            ));
        }
        let flat = g.reshape(d, &[s[0] * s[1], s[2]])?;
        proj.forward(g, store, flat)
    }

    /// The shared aggregator `T`: `x [L, hw, hw]` with per-level appearance
    /// embeddings `[hw, p]` for the image indexing the rows.
    /// Returns the refined `[L, hw, hw]` before the outer residual.
    pub fn transformer<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, app: &[Var]) -> Result<Var> {
        let (l, hw) = (self.cfg.levels(), self.cfg.hw());
        if g.shape(x) != [l, hw, hw] || app.len() != l {
            return Err(dim_err!(
                "aggregator expects [{l}, {hw}, {hw}] with {l} embeddings, got {:?} with {}",
                g.shape(x),
                app.len()
            ));
        }
        let app = app
            .iter()
            .map(|&a| g.reshape(a, &[1, hw, self.cfg.appearance_dim]))
            .collect::<Result<Vec<_>>>()?;
        let app = if l == 1 { app[0] } else { g.concat(&app, 0)? };
        let mut h = g.concat(&[x, app], 2)?;
        let pos = g.param(store, &self.pos)?;
        for enc in &self.encoders {
            let z = g.add(h, pos)?;
            h = enc.intra.forward(g, store, z)?;
            let t = g.permute(h, &[1, 0, 2])?;
            let t = enc.inter.forward(g, store, t)?;
            h = g.permute(t, &[1, 0, 2])?;
        }
        self.proj_out.forward(g, store, h)
    }

    /// `T([x, P(D)]) + x`.
    fn residual_pass<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, app: &[Var]) -> Result<Var> {
        let t = self.transformer(g, store, x, app)?;
        g.add(t, x)
    }

    /// Refines a stack `c [L, hw, hw]` whose rows index source positions,
    /// given features resized to the working grid. The result keeps the
    /// source-rows convention.
    pub fn aggregate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        c: Var,
        src: &[Var],
        tgt: &[Var],
    ) -> Result<Var> {
        let app_s = self.embed_all(g, store, src)?;
        let app_t = self.embed_all(g, store, tgt)?;
        match self.cfg.mode {
            SwapMode::Serial => self.serial(g, store, c, &app_s, &app_t),
            SwapMode::Parallel => self.parallel(g, store, c, &app_s, &app_t),
            SwapMode::Both => {
                let s = self.serial(g, store, c, &app_s, &app_t)?;
                self.parallel(g, store, s, &app_s, &app_t)
            }
        }
    }

    fn embed_all<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feats: &[Var]) -> Result<Vec<Var>> {
        if feats.len() != self.cfg.levels() {
            return Err(dim_err!("expected {} feature levels, got {}", self.cfg.levels(), feats.len()));
        }
        feats.iter().enumerate().map(|(l, &d)| self.appearance(g, store, l, d)).collect()
    }

    /// `S = T([Cᵀ, P(D_t)]) + Cᵀ` over target tokens, then
    /// `Ĉ = T([Sᵀ, P(D_s)]) + C` over source tokens.
    fn serial<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, c: Var, app_s: &[Var], app_t: &[Var]) -> Result<Var> {
        let ct = swap_in_graph(g, c)?;
        let s = self.residual_pass(g, store, ct, app_t)?;
        let st = swap_in_graph(g, s)?;
        let t = self.transformer(g, store, st, app_s)?;
        g.add(t, c)
    }

    /// `½ (swap(T([Cᵀ, P(D_t)]) + Cᵀ) + T([C, P(D_s)]) + C)`.
    fn parallel<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, c: Var, app_s: &[Var], app_t: &[Var]) -> Result<Var> {
        let ct = swap_in_graph(g, c)?;
        let r1 = self.residual_pass(g, store, ct, app_t)?;
        let r1 = swap_in_graph(g, r1)?;
        let r2 = self.residual_pass(g, store, c, app_s)?;
        let sum = g.add(r1, r2)?;
        Ok(g.scale(sum, 0.5))
    }

    /// Tensor-level convenience: aggregates a source-rows stack given
    /// features already on the working grid.
    pub fn aggregate_stack<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        stack: &CorrelationStack<T>,
        src: &[FeatureMap<T>],
        tgt: &[FeatureMap<T>],
    ) -> Result<CorrelationStack<T>> {
        if stack.grid != self.cfg.grid {
            return Err(dim_err!("stack grid {:?} differs from configured grid {:?}", stack.grid, self.cfg.grid));
        }
        let mut g = Graph::infer();
        let stack = match stack.token_axis {
            TokenAxis::Source => stack.clone(),
            TokenAxis::Target => stack.swap(),
        };
        let c = g.constant(stack.maps.clone());
        let s: Vec<Var> = src.iter().map(|f| g.constant(f.grid.clone())).collect();
        let t: Vec<Var> = tgt.iter().map(|f| g.constant(f.grid.clone())).collect();
        let out = self.aggregate(&mut g, store, c, &s, &t)?;
        CorrelationStack::new(g.value(out).clone(), stack.grid, TokenAxis::Source)
    }
}
