//! Parameter, memory and timing instrumentation.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catspp::{CatsppConfig, EfficientBlock};
use crate::config::RunConfig;
use crate::data::{generate_pair, PairRecord};
use crate::error::Result;
use crate::flow::aepe_in_graph;
use crate::graph::Graph;
use crate::model::{Aggregator, Model};
use crate::nn::TransformerBlock;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Standard blocks above this many parameters are not built; their peak
/// memory is reported as the lower bound of their parameter bytes.
pub const STANDARD_BUILD_LIMIT: usize = 32_000_000;

/// Grouping key of a parameter name: at most the first three dotted
/// components, never the tensor leaf (`cats.enc0.intra.q.w` → `cats.enc0.intra`).
pub fn module_key(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts.len() <= 2 {
        return name.to_string();
    }
    parts[..(parts.len() - 1).min(3)].join(".")
}

/// Exact scalar counts per module, in name order.
pub fn module_counts<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (name, p) in store.iter() {
        let key = module_key(name);
        match out.last_mut() {
            Some((k, n)) if *k == key => *n += p.value.len(),
            _ => out.push((key, p.value.len())),
        }
    }
    out
}

/// Learnable scalars of a pre-LN transformer block of width `f`
/// (two norms, Q/K/V/output projections, two-layer MLP of ratio `r`).
pub fn standard_block_params(f: usize, r: usize) -> usize {
    let norms = 2 * 2 * f;
    let attention = 4 * (f * f + f);
    let mlp = (f * r * f + r * f) + (r * f * f + f);
    norms + attention + mlp
}

/// Efficient block against a standard block over the same tokens
/// (target positions) and feature extent (source positions × channels).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockComparison {
    pub q: usize,
    pub tokens: usize,
    pub features: usize,
    pub efficient_params: usize,
    pub standard_params: usize,
    pub efficient_peak_bytes: usize,
    pub standard_peak_bytes: usize,
    /// Whether the standard figure was measured rather than bounded below.
    pub standard_measured: bool,
}

impl BlockComparison {
    pub fn param_ratio(&self) -> f64 {
        self.efficient_params as f64 / self.standard_params as f64
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    use rand::Rng;
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Builds both blocks for `layer` of `cfg` and runs one forward of each.
pub fn compare_layer(cfg: &CatsppConfig, layer: usize) -> Result<BlockComparison> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, d) = (cfg.embedded_extent(layer), cfg.d);
    let (tokens, features) = (n * n, n * n * d);

    let mut store = ParamStore::<f32>::new();
    let block = EfficientBlock::new(&mut store, &mut rng, "blk", cfg, layer)?;
    let efficient_params = store.num_scalars();
    let mut g = Graph::<f32>::infer();
    let m = g.input(random(&mut rng, &[n, n, n, n, d]));
    let app = g.input(random(&mut rng, &[tokens, cfg.appearance_dim]));
    block.forward(&mut g, &store, m, app)?;
    let efficient_peak_bytes = g.peak_bytes();

    let standard_params = standard_block_params(features, cfg.ffn_ratio);
    let input_bytes = tokens * features * std::mem::size_of::<f32>();
    let (standard_peak_bytes, standard_measured) = if standard_params <= STANDARD_BUILD_LIMIT {
        let mut store = ParamStore::<f32>::new();
        let block = TransformerBlock::new(&mut store, &mut rng, "std", features, 1, cfg.ffn_ratio)?;
        let mut g = Graph::<f32>::infer();
        let x = g.input(random(&mut rng, &[1, tokens, features]));
        block.forward(&mut g, &store, x)?;
        (g.peak_bytes(), true)
    } else {
        // every parameter and the input are resident during the forward
        (standard_params * std::mem::size_of::<f32>() + input_bytes, false)
    };
    Ok(BlockComparison {
        q: cfg.layers[layer].q,
        tokens,
        features,
        efficient_params,
        standard_params,
        efficient_peak_bytes,
        standard_peak_bytes,
        standard_measured,
    })
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub modules: Vec<(String, usize)>,
    pub total_params: usize,
    pub aggregator_params: usize,
    pub forward_peak_bytes: usize,
    pub forward: Duration,
    pub backward: Duration,
    pub blocks: Vec<BlockComparison>,
}

/// One forward (peak bytes, time) and one backward on a synthetic pair.
pub fn profile(model: &Model, store: &ParamStore<f32>, pair: &PairRecord) -> Result<(usize, Duration, Duration)> {
    let mut g = Graph::<f32>::train();
    let t0 = Instant::now();
    let fwd = model.forward(&mut g, store, &pair.source, &pair.target)?;
    let gt = g.constant(pair.flow.grid.cast());
    let mask = pair.valid_mask();
    let loss = aepe_in_graph(&mut g, fwd.flow, gt, Some(&mask))?;
    let forward = t0.elapsed();
    let peak = g.peak_bytes();
    let t1 = Instant::now();
    g.backward(loss)?;
    Ok((peak, forward, t1.elapsed()))
}

pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, &mut rng, cfg)?;
    let pair = generate_pair(cfg.seed, cfg.warp_magnitude, cfg.grid.0)?.record(cfg.grid);
    let (forward_peak_bytes, forward, backward) = profile(&model, &store, &pair)?;
    let blocks = match &model.aggregator {
        Aggregator::Catspp(pp) => {
            (0..pp.config().layers.len()).map(|i| compare_layer(pp.config(), i)).collect::<Result<_>>()?
        }
        Aggregator::Cats(_) => Vec::new(),
    };
    Ok(BenchReport {
        modules: module_counts(&store),
        total_params: store.num_scalars(),
        aggregator_params: store.count_prefix(&format!("{}.", model.aggregator_prefix())),
        forward_peak_bytes,
        forward,
        backward,
        blocks,
    })
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (m, n) in &self.modules {
            let _ = writeln!(s, "params {m} {n}");
        }
        let _ = writeln!(s, "params_total {}", self.total_params);
        let _ = writeln!(s, "params_aggregator {}", self.aggregator_params);
        let _ = writeln!(s, "forward_peak_bytes {}", self.forward_peak_bytes);
        let _ = writeln!(s, "forward_seconds {:.4}", self.forward.as_secs_f64());
        let _ = writeln!(s, "backward_seconds {:.4}", self.backward.as_secs_f64());
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "block q={} tokens={} features={} efficient_params={} standard_params={} ratio={:.4} \
                 efficient_peak_bytes={} standard_peak_bytes={}{}",
                b.q,
                b.tokens,
                b.features,
                b.efficient_params,
                b.standard_params,
                b.param_ratio(),
                b.efficient_peak_bytes,
                if b.standard_measured { "" } else { ">=" },
                b.standard_peak_bytes,
            );
        }
        s
    }
}
