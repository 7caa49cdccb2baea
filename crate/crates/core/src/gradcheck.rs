//! Finite-difference gradient checks in f64.
//!
//! Each case builds `out = f(inputs; params)` and checks
//! `d/dθ Σ w ⊙ out` for random fixed `w` against central differences at
//! sampled coordinates of every input and parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cats::{Cats, CatsConfig, SwapMode};
use crate::catspp::{Catspp, CatsppConfig, EfficientBlock, LayerSpec};
use crate::correlation::correlate;
use crate::error::{arg_err, Result};
use crate::flow::{aepe_in_graph, channel_mean, soft_argmax_in_graph};
use crate::graph::{Graph, Var};
use crate::nn::TransformerBlock;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 5;
/// Coordinates sampled per tensor per seed.
const SAMPLES: usize = 4;

/// Every checkable op name, in report order.
pub const OPS: &[&str] = &[
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "conv4d",
    "resample",
    "upsample4d",
    "permute",
    "reshape",
    "concat",
    "sum",
    "mean_axis",
    "normalize_l2",
    "norm_last",
    "cosine_correlation",
    "soft_argmax",
    "aepe",
    "transformer_block",
    "aggregate_cats",
    "volumetric_ffn",
    "efficient_block",
    "catspp",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub max_rel_err: f64,
    pub seeds: usize,
    pub coordinates: usize,
    /// Input or parameter holding the worst coordinate.
    pub worst_at: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    store: ParamStore<f64>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign, clear of kinks at 0.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Adds small random noise to every parameter so that zero-initialized
/// ones (biases, positional embeddings) are exercised away from zero.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let simple = |inputs: Vec<Tensor<f64>>, build: Build| Case { inputs, store: ParamStore::new(), build };
    Ok(match op {
        "matmul" => simple(
            vec![uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[4, 5], -1.0, 1.0)],
            Box::new(|g, _, x| g.matmul(x[0], x[1])),
        ),
        "bmm" => simple(
            vec![uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 4, 3], -1.0, 1.0), uniform(rng, &[2, 5, 4], -1.0, 1.0)],
            Box::new(|g, _, x| {
                let a = g.bmm(x[0], x[1], false)?;
                let b = g.bmm(x[0], x[2], true)?;
                let a = g.reshape(a, &[2, 9])?;
                let b = g.reshape(b, &[2, 15])?;
                g.concat(&[a, b], 1)
            }),
        ),
        "add" => simple(
            vec![uniform(rng, &[3, 2, 4], -1.0, 1.0), uniform(rng, &[2, 4], -1.0, 1.0)],
            Box::new(|g, _, x| g.add(x[0], x[1])),
        ),
        "sub" => simple(
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(|g, _, x| g.sub(x[0], x[1])),
        ),
        "mul" => simple(
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(|g, _, x| g.mul(x[0], x[1])),
        ),
        "scale" => simple(vec![uniform(rng, &[5], -1.0, 1.0)], Box::new(|g, _, x| Ok(g.scale(x[0], -1.7)))),
        "relu" => simple(vec![off_zero(rng, &[3, 4])], Box::new(|g, _, x| Ok(g.relu(x[0])))),
        "gelu" => simple(vec![uniform(rng, &[3, 4], -3.0, 3.0)], Box::new(|g, _, x| Ok(g.gelu(x[0])))),
        "softmax" => simple(
            vec![uniform(rng, &[3, 4, 2], -2.0, 2.0)],
            Box::new(|g, _, x| {
                let a = g.softmax(x[0], 1)?;
                let b = g.softmax(x[0], 2)?;
                g.add(a, b)
            }),
        ),
        "layer_norm" => simple(
            vec![uniform(rng, &[3, 5], -1.0, 1.0), uniform(rng, &[5], 0.5, 1.5), uniform(rng, &[5], -0.5, 0.5)],
            Box::new(|g, _, x| g.layer_norm(x[0], x[1], x[2])),
        ),
        "conv4d" => simple(
            vec![uniform(rng, &[3, 4, 2, 3, 2], -1.0, 1.0), uniform(rng, &[3, 3, 1, 3, 2, 3], -1.0, 1.0)],
            Box::new(|g, _, x| {
                let a = g.conv4d(x[0], x[1], [1; 4])?;
                let b = g.conv4d(x[0], x[1], [2, 1, 2, 2])?;
                let a = g.reshape(a, &[g.value(a).len()])?;
                let b = g.reshape(b, &[g.value(b).len()])?;
                g.concat(&[a, b], 0)
            }),
        ),
        "resample" => simple(
            vec![uniform(rng, &[5, 3, 2], -1.0, 1.0)],
            Box::new(|g, _, x| {
                let a = g.resample(x[0], 0, 3)?;
                g.resample(a, 1, 7)
            }),
        ),
        "upsample4d" => simple(vec![uniform(rng, &[2, 3, 2, 2, 2], -1.0, 1.0)], Box::new(|g, _, x| g.upsample4d(x[0], 2))),
        "permute" => simple(vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|g, _, x| g.permute(x[0], &[2, 0, 1]))),
        "reshape" => simple(vec![uniform(rng, &[2, 6], -1.0, 1.0)], Box::new(|g, _, x| g.reshape(x[0], &[3, 4]))),
        "concat" => simple(
            vec![uniform(rng, &[2, 3, 2], -1.0, 1.0), uniform(rng, &[2, 1, 2], -1.0, 1.0)],
            Box::new(|g, _, x| g.concat(&[x[0], x[1]], 1)),
        ),
        "sum" => simple(vec![uniform(rng, &[3, 2], -1.0, 1.0)], Box::new(|g, _, x| Ok(g.sum(x[0])))),
        "mean_axis" => simple(vec![uniform(rng, &[3, 4, 2], -1.0, 1.0)], Box::new(|g, _, x| g.mean_axis(x[0], 1))),
        "normalize_l2" => simple(vec![off_zero(rng, &[3, 4])], Box::new(|g, _, x| g.normalize_l2(x[0]))),
        "norm_last" => simple(vec![off_zero(rng, &[3, 4])], Box::new(|g, _, x| g.norm_last(x[0]))),
        // positive features keep every cosine clear of the ReLU kink
        "cosine_correlation" => simple(
            vec![uniform(rng, &[2, 3, 4], 0.1, 1.0), uniform(rng, &[3, 2, 4], 0.1, 1.0)],
            Box::new(|g, _, x| correlate(g, x[0], x[1])),
        ),
        "soft_argmax" => simple(
            vec![uniform(rng, &[6, 6], 0.0, 1.0)],
            Box::new(|g, _, x| soft_argmax_in_graph(g, x[0], (2, 3), 3.0)),
        ),
        "aepe" => {
            let gt = uniform(rng, &[3, 3, 2], -1.0, 1.0);
            let pred = Tensor::from_fn(&[3, 3, 2], |i| gt.data()[i] + if i % 2 == 0 { 0.5 } else { -0.3 });
            let mask: Vec<bool> = (0..9).map(|i| i != 4).collect();
            simple(vec![pred, gt], Box::new(move |g, _, x| aepe_in_graph(g, x[0], x[1], Some(&mask))))
        }
        "transformer_block" => {
            let mut store = ParamStore::new();
            let block = TransformerBlock::new(&mut store, rng, "blk", 6, 2, 2)?;
            jitter(&mut store, rng);
            Case {
                inputs: vec![uniform(rng, &[2, 3, 6], -1.0, 1.0)],
                store,
                build: Box::new(move |g, s, x| block.forward(g, s, x[0])),
            }
        }
        "aggregate_cats" => {
            let mut store = ParamStore::new();
            let cfg = CatsConfig {
                n_encoders: 1,
                n_heads: 2,
                appearance_dim: 2,
                grid: (2, 2),
                feature_channels: vec![3, 2],
                mode: SwapMode::Serial,
                ffn_ratio: 2,
            };
            let cats = Cats::new(&mut store, rng, cfg)?;
            jitter(&mut store, rng);
            Case {
                inputs: vec![
                    uniform(rng, &[2, 4, 4], 0.0, 1.0),
                    uniform(rng, &[2, 2, 3], -1.0, 1.0),
                    uniform(rng, &[2, 2, 2], -1.0, 1.0),
                    uniform(rng, &[2, 2, 3], -1.0, 1.0),
                    uniform(rng, &[2, 2, 2], -1.0, 1.0),
                ],
                store,
                build: Box::new(move |g, s, x| cats.aggregate(g, s, x[0], &x[1..3], &x[3..5])),
            }
        }
        "volumetric_ffn" | "efficient_block" => {
            let mut store = ParamStore::new();
            // layer norm over only two channels is too curved for h = 1e-4
            // once attention mixes it, so the full block runs at d = 4
            let d = if op == "volumetric_ffn" { 2 } else { 4 };
            let cfg = small_catspp(&[2], d);
            let block = EfficientBlock::new(&mut store, rng, "blk", &cfg, 0)?;
            jitter(&mut store, rng);
            let m = uniform(rng, &[2, 2, 2, 2, d], -1.0, 1.0);
            if op == "volumetric_ffn" {
                Case { inputs: vec![m], store, build: Box::new(move |g, s, x| block.volumetric_ffn(g, s, x[0])) }
            } else {
                Case {
                    inputs: vec![m, uniform(rng, &[4, 2], -1.0, 1.0)],
                    store,
                    build: Box::new(move |g, s, x| block.forward(g, s, x[0], x[1])),
                }
            }
        }
        "catspp" => {
            let mut store = ParamStore::new();
            let cfg = small_catspp(&[4, 2], 4);
            let model = Catspp::new(&mut store, rng, cfg)?;
            jitter(&mut store, rng);
            Case {
                inputs: vec![
                    uniform(rng, &[4, 4, 4, 4, 2], 0.0, 1.0),
                    uniform(rng, &[2, 2, 2, 2, 2], 0.0, 1.0),
                    uniform(rng, &[4, 4, 3], -1.0, 1.0),
                    uniform(rng, &[2, 2, 3], -1.0, 1.0),
                    uniform(rng, &[4, 4, 3], -1.0, 1.0),
                    uniform(rng, &[2, 2, 3], -1.0, 1.0),
                ],
                store,
                build: Box::new(move |g, s, x| {
                    let out = model.aggregate(g, s, &x[0..2], &x[2..4], &x[4..6])?;
                    let scores = channel_mean(g, out)?;
                    soft_argmax_in_graph(g, scores, (4, 4), 2.0)
                }),
            }
        }
        _ => return Err(arg_err!("unknown op `{op}`")),
    })
}

/// A tiny pyramid with the given native extents (finest first), stride-1
/// pointwise embedding and `d` aggregation channels.
pub fn small_catspp(extents: &[usize], d: usize) -> CatsppConfig {
    CatsppConfig {
        layers: extents
            .iter()
            .enumerate()
            .map(|(i, &extent)| LayerSpec { q: 3 + i, extent, levels: 2, app_channels: 3 })
            .collect(),
        d,
        embed_kernel: 1,
        embed_strides: vec![1],
        proj_stride: 2,
        proj_kernel: 3,
        attn_dim: 4,
        ffn_ratio: 2,
        ffn_kernel: 3,
        n_encoders: 1,
        appearance_dim: 2,
        mode: SwapMode::Parallel,
    }
}

fn loss(case: &Case, inputs: &[Tensor<f64>], store: &ParamStore<f64>, w: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::infer();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.build)(&mut g, store, &vars)?;
    Ok(g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

fn sample_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    if n <= SAMPLES {
        (0..n).collect()
    } else {
        (0..SAMPLES).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Runs the check for `op` over `seeds` seeds.
pub fn check(op: &str, seeds: usize) -> Result<CheckResult> {
    if !OPS.contains(&op) {
        return Err(arg_err!("unknown op `{op}`"));
    }
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut coords = 0;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 ^ seed);
        let mut case = case(op, &mut rng)?;

        let mut g = Graph::train();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (case.build)(&mut g, &case.store, &vars)?;
        let w = uniform(&mut rng, g.shape(out), -1.0, 1.0);
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        let l = g.sum(prod);
        let grads = g.backward(l)?;
        case.store.zero_grad();
        case.store.accumulate(&g, &grads)?;

        let mut rel = |at: &str, analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * STEP);
            let err = (analytic - fd).abs() / fd.abs().max(1.0);
            if err > worst {
                worst = err;
                worst_at = at.to_string();
            }
            coords += 1;
        };
        for (k, &v) in vars.iter().enumerate() {
            let zeros = vec![0.0; case.inputs[k].len()];
            let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
            for i in sample_coords(&mut rng, case.inputs[k].len()) {
                let mut inputs = case.inputs.clone();
                inputs[k].data_mut()[i] += STEP;
                let plus = loss(&case, &inputs, &case.store, &w)?;
                inputs[k].data_mut()[i] -= 2.0 * STEP;
                let minus = loss(&case, &inputs, &case.store, &w)?;
                rel(&format!("input{k}[{i}]"), analytic[i], plus, minus);
            }
        }
        let names: Vec<String> = case.store.names().cloned().collect();
        for name in names {
            let n = case.store.value(&name)?.len();
            for i in sample_coords(&mut rng, n) {
                let analytic = case.store.get(&name)?.grad.data()[i];
                let mut store = case.store.clone();
                store.get_mut(&name)?.value.data_mut()[i] += STEP;
                let plus = loss(&case, &case.inputs, &store, &w)?;
                store.get_mut(&name)?.value.data_mut()[i] -= 2.0 * STEP;
                let minus = loss(&case, &case.inputs, &store, &w)?;
                rel(&format!("{name}[{i}]"), analytic, plus, minus);
            }
        }
    }
    Ok(CheckResult { op: op.to_string(), max_rel_err: worst, seeds, coordinates: coords, worst_at })
}

pub fn check_all(seeds: usize) -> Result<Vec<CheckResult>> {
    OPS.iter().map(|op| check(op, seeds)).collect()
}
