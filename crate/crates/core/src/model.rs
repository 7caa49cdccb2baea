//! Backbone + aggregator + flow head, wired from a [`RunConfig`].

use rand::Rng;

use crate::backbone::{Backbone, Feature};
use crate::cats::{Cats, CatsConfig};
use crate::catspp::{Catspp, CatsppConfig, LayerSpec};
use crate::config::{ModelKind, RunConfig};
use crate::correlation::{hyper_in_graph, stack_in_graph};
use crate::data::IMAGE_SIZE;
use crate::error::{cfg_err, Result};
use crate::flow::{channel_mean, soft_argmax_in_graph};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum Aggregator {
    Cats(Cats),
    Catspp(Catspp),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub aggregator: Aggregator,
    /// Backbone levels whose raw correlations feed the winner-takes-all
    /// baseline (and the cats stack).
    pub stack_levels: Vec<usize>,
    pub grid: (usize, usize),
    pub beta: f64,
}

/// Graph values produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Predicted flow `[h, w, 2]`.
    pub flow: Var,
    /// Aggregated scores `[hw, hw]` the flow was read from.
    pub scores: Var,
}

pub fn cats_config(cfg: &RunConfig) -> Result<CatsConfig> {
    let feature_channels = cfg
        .cats
        .levels
        .iter()
        .map(|&l| Backbone::channels(l).ok_or_else(|| cfg_err!("backbone has no level {l}")))
        .collect::<Result<_>>()?;
    Ok(CatsConfig {
        n_encoders: cfg.cats.n_encoders,
        n_heads: cfg.cats.n_heads,
        appearance_dim: cfg.cats.p,
        grid: cfg.grid,
        feature_channels,
        mode: cfg.resolved_mode(),
        ffn_ratio: cfg.cats.ffn_ratio,
    })
}

/// Levels of a pyramid layer, in backbone order.
fn layer_levels(q: usize) -> Vec<usize> {
    crate::backbone::LEVELS.iter().filter(|l| l.1 == q).map(|l| l.0).collect()
}

pub fn catspp_config(cfg: &RunConfig) -> Result<CatsppConfig> {
    let mut qs = cfg.catspp.layers.clone();
    qs.sort_unstable();
    qs.dedup();
    let layers = qs
        .iter()
        .map(|&q| {
            let levels = layer_levels(q);
            let last = *levels.last().ok_or_else(|| cfg_err!("backbone has no pyramid layer {q}"))?;
            Ok(LayerSpec {
                q,
                extent: Backbone::extent(last, IMAGE_SIZE).expect("known level"),
                levels: levels.len(),
                app_channels: Backbone::channels(last).expect("known level"),
            })
        })
        .collect::<Result<_>>()?;
    let c = &cfg.catspp;
    let out = CatsppConfig {
        layers,
        d: c.d,
        embed_kernel: c.embed_kernel,
        embed_strides: c.embed_strides.clone(),
        proj_stride: c.s,
        proj_kernel: c.proj_kernel,
        attn_dim: c.attn_dim,
        ffn_ratio: c.ffn_ratio,
        ffn_kernel: c.ffn_kernel,
        n_encoders: c.n_encoders,
        appearance_dim: c.p,
        mode: cfg.resolved_mode(),
    };
    out.validate()?;
    let n = out.embedded_extent(0);
    if cfg.grid != (n, n) {
        return Err(cfg_err!("catspp finest embedded grid is {n}x{n} but grid is {:?}", cfg.grid));
    }
    Ok(out)
}

impl Model {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &RunConfig) -> Result<Self> {
        let backbone = Backbone::new(store, rng)?;
        let aggregator = match cfg.model {
            ModelKind::Cats => Aggregator::Cats(Cats::new(store, rng, cats_config(cfg)?)?),
            ModelKind::Catspp => Aggregator::Catspp(Catspp::new(store, rng, catspp_config(cfg)?)?),
        };
        for &l in &cfg.cats.levels {
            let e = Backbone::extent(l, IMAGE_SIZE).ok_or_else(|| cfg_err!("backbone has no level {l}"))?;
            if e < cfg.grid.0 || e < cfg.grid.1 {
                return Err(cfg_err!("level {l} extent {e} is below the {:?} grid", cfg.grid));
            }
        }
        Ok(Model { backbone, aggregator, stack_levels: cfg.cats.levels.clone(), grid: cfg.grid, beta: cfg.beta })
    }

    fn pick(feats: &[Feature], levels: &[usize]) -> Vec<Var> {
        levels.iter().filter_map(|&l| feats.iter().find(|f| f.level == l).map(|f| f.var)).collect()
    }

    /// Raw level-averaged correlation `[hw, hw]` of the stack levels.
    fn raw_scores<T: Scalar>(&self, g: &mut Graph<T>, fs: &[Feature], ft: &[Feature]) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let (s, t) = (Self::pick(fs, &self.stack_levels), Self::pick(ft, &self.stack_levels));
        let sv = stack_in_graph(g, &s, &t, self.grid.0, self.grid.1)?;
        Ok((sv.corr, sv.src, sv.tgt))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        source: &Tensor<f32>,
        target: &Tensor<f32>,
    ) -> Result<Forward> {
        let (si, ti) = (g.constant(source.cast()), g.constant(target.cast()));
        let fs = self.backbone.forward(g, store, si)?;
        let ft = self.backbone.forward(g, store, ti)?;
        let scores = match &self.aggregator {
            Aggregator::Cats(cats) => {
                let (c, s, t) = self.raw_scores(g, &fs, &ft)?;
                let out = cats.aggregate(g, store, c, &s, &t)?;
                g.mean_axis(out, 0)?
            }
            Aggregator::Catspp(pp) => {
                let cfg = pp.config();
                let (mut hyper, mut app_s, mut app_t) = (Vec::new(), Vec::new(), Vec::new());
                for spec in &cfg.layers {
                    let levels = layer_levels(spec.q);
                    let (s, t) = (Self::pick(&fs, &levels), Self::pick(&ft, &levels));
                    let pairs: Vec<(Var, Var)> = s.iter().copied().zip(t.iter().copied()).collect();
                    hyper.push(hyper_in_graph(g, &pairs)?);
                    app_s.push(*s.last().expect("non-empty layer"));
                    app_t.push(*t.last().expect("non-empty layer"));
                }
                let out = pp.aggregate(g, store, &hyper, &app_s, &app_t)?;
                channel_mean(g, out)?
            }
        };
        let flow = soft_argmax_in_graph(g, scores, self.grid, self.beta)?;
        Ok(Forward { flow, scores })
    }

    /// The un-aggregated level-averaged correlation used by the
    /// winner-takes-all baseline, `[hw, hw]`.
    pub fn raw_correlation<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        source: &Tensor<f32>,
        target: &Tensor<f32>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::infer();
        let (si, ti) = (g.constant(source.cast()), g.constant(target.cast()));
        let fs = self.backbone.forward(&mut g, store, si)?;
        let ft = self.backbone.forward(&mut g, store, ti)?;
        let (c, _, _) = self.raw_scores(&mut g, &fs, &ft)?;
        let m = g.mean_axis(c, 0)?;
        Ok(g.value(m).clone())
    }

    /// Parameter-name prefix of the aggregator.
    pub fn aggregator_prefix(&self) -> &'static str {
        match self.aggregator {
            Aggregator::Cats(_) => crate::cats::PREFIX,
            Aggregator::Catspp(_) => crate::catspp::PREFIX,
        }
    }
}
