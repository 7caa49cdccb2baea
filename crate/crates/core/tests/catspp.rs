mod common;

use catagg::cats::SwapMode;
use catagg::catspp::{Catspp, CatsppConfig, EfficientBlock, LayerSpec};
use catagg::cost::standard_block_params;
use catagg::correlation::swap_in_graph;
use catagg::nn::{TransformerBlock, OUTPUT_PROJECTIONS};
use catagg::{Error, Graph, ParamStore, Tensor, Var};
use common::{attention, gelu, layer_norm, linear, max_diff, p, rand_tensor, randomize, rng};

fn toy(extents: &[usize], d: usize, embed_kernel: usize, embed_strides: Vec<usize>, mode: SwapMode) -> CatsppConfig {
    CatsppConfig {
        layers: extents
            .iter()
            .enumerate()
            .map(|(i, &extent)| LayerSpec { q: 3 + i, extent, levels: 2, app_channels: 3 })
            .collect(),
        d,
        embed_kernel,
        embed_strides,
        proj_stride: 2,
        proj_kernel: 3,
        attn_dim: 6,
        ffn_ratio: 2,
        ffn_kernel: 3,
        n_encoders: 1,
        appearance_dim: 3,
        mode,
    }
}

fn perturbed(store: &mut ParamStore<f64>, seed: u64) {
    randomize(store, seed, 0.3);
    for (name, prm) in store.iter_mut() {
        if name.ends_with(".gamma") {
            prm.value.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
    }
}

// ---------------------------------------------------------------------------
// straight-line reference of one efficient block

fn conv(store: &ParamStore<f64>, name: &str, x: &[f64], s: [usize; 5], stride: [usize; 4]) -> (Vec<f64>, [usize; 5]) {
    let w = store.value(&format!("{name}.w")).unwrap();
    let ws = w.shape();
    let (mut y, os) = common::conv4d(x, s, w.data(), [ws[0], ws[1], ws[2], ws[3], ws[4], ws[5]], stride);
    let b = p(store, &format!("{name}.b"));
    for (i, v) in y.iter_mut().enumerate() {
        *v += b[i % os[4]];
    }
    (y, os)
}

fn ln(store: &ParamStore<f64>, name: &str, x: &[f64], f: usize) -> Vec<f64> {
    layer_norm(x, f, &p(store, &format!("{name}.gamma")), &p(store, &format!("{name}.beta")))
}

/// `[a, b, n, n, c]` → tokens `[n·n, a·b·c]` (target positions as tokens).
fn tokens(x: &[f64], s: [usize; 5]) -> Vec<f64> {
    let (a, b, n1, n2, c) = (s[0], s[1], s[2], s[3], s[4]);
    let f = a * b * c;
    let mut t = vec![0.0; n1 * n2 * f];
    for i in 0..a {
        for j in 0..b {
            for k in 0..n1 {
                for l in 0..n2 {
                    for ch in 0..c {
                        t[(k * n2 + l) * f + (i * b + j) * c + ch] = x[(((i * b + j) * n1 + k) * n2 + l) * c + ch];
                    }
                }
            }
        }
    }
    t
}

struct Qkv {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn qkv_oracle(store: &ParamStore<f64>, name: &str, cfg: &CatsppConfig, m: &[f64], n: usize, app: &[f64]) -> Qkv {
    let d = cfg.d;
    let s5 = [n, n, n, n, d];
    let m_ln = ln(store, &format!("{name}.ln_m"), m, d);
    let s = cfg.proj_stride;
    let pos = p(store, &format!("{name}.pos"));
    let path = |which: &str| {
        let (x, os) = conv(store, &format!("{name}.{which}_conv"), &m_ln, s5, [s, s, 1, 1]);
        let x = ln(store, &format!("{name}.{which}_ln"), &x, d);
        let t = tokens(&x, os);
        let f = os[0] * os[1] * d;
        let pd = cfg.appearance_dim;
        let mut cat = vec![0.0; n * n * (f + pd)];
        for tok in 0..n * n {
            cat[tok * (f + pd)..tok * (f + pd) + f].copy_from_slice(&t[tok * f..(tok + 1) * f]);
            cat[tok * (f + pd) + f..(tok + 1) * (f + pd)].copy_from_slice(&app[tok * pd..(tok + 1) * pd]);
        }
        let proj = format!("{name}.{which}_proj");
        let y = linear(&cat, n * n, f + pd, &p(store, &format!("{proj}.w")), &p(store, &format!("{proj}.b")), cfg.attn_dim);
        y.iter().zip(pos.iter()).map(|(a, b)| a + b).collect::<Vec<_>>()
    };
    let (v, vs) = conv(store, &format!("{name}.v_conv"), &m_ln, s5, [1; 4]);
    let v = ln(store, &format!("{name}.v_ln"), &v, d);
    Qkv { q: path("q"), k: path("k"), v: tokens(&v, vs) }
}

fn ffn_oracle(store: &ParamStore<f64>, name: &str, z: &[f64], s: [usize; 5]) -> Vec<f64> {
    let x = ln(store, &format!("{name}.ffn_ln"), z, s[4]);
    let (h, hs) = conv(store, &format!("{name}.ffn1"), &x, s, [1; 4]);
    let h: Vec<f64> = h.into_iter().map(gelu).collect();
    let (y, _) = conv(store, &format!("{name}.ffn2"), &h, hs, [1; 4]);
    y.iter().zip(z).map(|(a, b)| a + b).collect()
}

fn block_oracle(store: &ParamStore<f64>, name: &str, cfg: &CatsppConfig, m: &[f64], n: usize, app: &[f64]) -> Vec<f64> {
    let d = cfg.d;
    let t = qkv_oracle(store, name, cfg, m, n, app);
    let nt = n * n;
    let zhat = attention(&t.q, &t.k, &t.v, nt, cfg.attn_dim, nt * d, 1);
    // token (target) tok, feature (source pos, channel) → volume
    let mut z = m.to_vec();
    for tok in 0..nt {
        for src in 0..nt {
            for ch in 0..d {
                z[(src * nt + tok) * d + ch] += zhat[tok * nt * d + src * d + ch];
            }
        }
    }
    ffn_oracle(store, name, &z, [n, n, n, n, d])
}

fn swap_vol(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let nt = n * n;
    let mut y = vec![0.0; x.len()];
    for s in 0..nt {
        for t in 0..nt {
            for ch in 0..c {
                y[(t * nt + s) * c + ch] = x[(s * nt + t) * c + ch];
            }
        }
    }
    y
}

/// The full coarse-to-fine recursion for parallel mode.
fn pyramid_oracle(
    store: &ParamStore<f64>,
    cfg: &CatsppConfig,
    hyper: &[Tensor<f64>],
    src: &[Tensor<f64>],
    tgt: &[Tensor<f64>],
) -> Vec<f64> {
    let d = cfg.d;
    let mut carry: Option<(Vec<f64>, usize)> = None;
    for i in (0..cfg.layers.len()).rev() {
        let spec = &cfg.layers[i];
        let base = format!("catspp.l{}", spec.q);
        let mut x = hyper[i].data().to_vec();
        let mut s = [spec.extent, spec.extent, spec.extent, spec.extent, spec.levels];
        for (j, &st) in cfg.embed_strides.iter().enumerate() {
            let (y, ys) = conv(store, &format!("{base}.embed{j}"), &x, s, [st; 4]);
            x = y.into_iter().map(gelu).collect();
            s = ys;
        }
        let n = s[0];
        if let Some((c, cn)) = carry {
            let up = common::upsample4d(&c, cn, d);
            x = x.iter().zip(&up).map(|(a, b)| a + b).collect();
        }
        let app = |f: &Tensor<f64>| {
            let fs = f.shape();
            let r = common::resize2d(f.data(), fs[0], fs[1], fs[2], n, n);
            linear(&r, n * n, fs[2], &p(store, &format!("{base}.app.w")), &p(store, &format!("{base}.app.b")), cfg.appearance_dim)
        };
        let (app_s, app_t) = (app(&src[i]), app(&tgt[i]));
        let run = |m: &[f64], a: &[f64]| {
            let mut m = m.to_vec();
            for e in 0..cfg.n_encoders {
                m = block_oracle(store, &format!("{base}.enc{e}"), cfg, &m, n, a);
            }
            m
        };
        let a = run(&x, &app_t);
        let b = swap_vol(&run(&swap_vol(&x, n, d), &app_s), n, d);
        carry = Some((a.iter().zip(&b).map(|(u, v)| 0.5 * (u + v)).collect(), n));
    }
    carry.unwrap().0
}

// ---------------------------------------------------------------------------

fn block_instance(cfg: &CatsppConfig, seed: u64) -> (ParamStore<f64>, EfficientBlock, Tensor<f64>, Tensor<f64>) {
    let mut store = ParamStore::new();
    let b = EfficientBlock::new(&mut store, &mut rng(seed), "blk", cfg, 0).unwrap();
    perturbed(&mut store, seed + 1);
    let n = cfg.embedded_extent(0);
    let mut r = rng(seed + 2);
    let m = rand_tensor(&mut r, &[n, n, n, n, cfg.d], -1.0, 1.0);
    let app = rand_tensor(&mut r, &[n * n, cfg.appearance_dim], -1.0, 1.0);
    (store, b, m, app)
}

#[test]
fn qkv_matches_straight_line_oracle() {
    let cfg = toy(&[4], 3, 1, vec![1], SwapMode::Parallel);
    let (store, b, m, app) = block_instance(&cfg, 60);
    let mut g = Graph::infer();
    let (mv, av) = (g.constant(m.clone()), g.constant(app.clone()));
    let (q, k, v) = b.qkv(&mut g, &store, mv, av).unwrap();
    let want = qkv_oracle(&store, "blk", &cfg, m.data(), 4, app.data());
    assert_eq!(g.shape(q), &[16, 6]);
    assert_eq!(g.shape(v), &[16, 16 * 3]);
    assert!(max_diff(g.value(q).data(), &want.q) < 1e-5);
    assert!(max_diff(g.value(k).data(), &want.k) < 1e-5);
    assert!(max_diff(g.value(v).data(), &want.v) < 1e-5);
}

#[test]
fn projection_stride_shrinks_token_features_by_s_squared() {
    let mut cfg = toy(&[8], 4, 1, vec![1], SwapMode::Parallel);
    cfg.appearance_dim = 5;
    assert_eq!(cfg.reduced_extent(0), 4);
    assert_eq!(cfg.qk_features(0), 16 * 4 + 5);
    let mut store = ParamStore::<f32>::new();
    EfficientBlock::new(&mut store, &mut rng(61), "blk", &cfg, 0).unwrap();
    // hw = 64 source positions → 16 after the stride-2 projection
    assert_eq!(store.value("blk.q_proj.w").unwrap().shape(), &[64 * 4 / 4 + 5, 6]);
    assert_eq!(store.value("blk.v_conv.w").unwrap().shape(), &[3, 3, 3, 3, 4, 4]);
}

#[test]
fn zero_appearance_leaves_the_correlation_branch_plus_pos() {
    let cfg = toy(&[4], 2, 1, vec![1], SwapMode::Parallel);
    let (mut store, b, m, _) = block_instance(&cfg, 62);
    let zero = Tensor::zeros(&[16, 3]);
    // the same block with the appearance rows of the projections removed
    let mut g = Graph::infer();
    let (mv, av) = (g.constant(m.clone()), g.constant(zero.clone()));
    let (q, _, _) = b.qkv(&mut g, &store, mv, av).unwrap();
    let got = g.value(q).clone();
    let w = store.get_mut("blk.q_proj.w").unwrap();
    let rows = w.value.shape()[0];
    for r in rows - 3..rows {
        for c in 0..6 {
            let idx = r * 6 + c;
            w.value.data_mut()[idx] = 123.0;
        }
    }
    let mut g = Graph::infer();
    let (mv, av) = (g.constant(m), g.constant(zero));
    let (q2, _, _) = b.qkv(&mut g, &store, mv, av).unwrap();
    assert_eq!(g.value(q2), &got, "appearance weights must not matter for zero features");
}

#[test]
fn block_matches_straight_line_oracle() {
    for (extent, d, seed) in [(4usize, 3usize, 63u64), (2, 2, 64)] {
        let cfg = toy(&[extent], d, 1, vec![1], SwapMode::Parallel);
        let (store, b, m, app) = block_instance(&cfg, seed);
        let mut g = Graph::infer();
        let (mv, av) = (g.constant(m.clone()), g.constant(app.clone()));
        let y = b.forward(&mut g, &store, mv, av).unwrap();
        let want = block_oracle(&store, "blk", &cfg, m.data(), extent, app.data());
        let diff = max_diff(g.value(y).data(), &want);
        assert!(diff < 1e-5, "extent {extent}: {diff}");
    }
}

#[test]
fn volumetric_ffn_examples() {
    let cfg = toy(&[4], 3, 1, vec![1], SwapMode::Parallel);
    let (mut store, b, m, _) = block_instance(&cfg, 65);
    let mut g = Graph::infer();
    let mv = g.constant(m.clone());
    let y = b.volumetric_ffn(&mut g, &store, mv).unwrap();
    assert!(max_diff(g.value(y).data(), &ffn_oracle(&store, "blk", m.data(), [4, 4, 4, 4, 3])) < 1e-10);

    for s in [".ffn2.w", ".ffn2.b"] {
        store.zero_matching(&[s]);
    }
    let mut g = Graph::infer();
    let mv = g.constant(m.clone());
    let y = b.volumetric_ffn(&mut g, &store, mv).unwrap();
    assert_eq!(g.value(y), &m);

    // constant input with 1⁴ kernels is a pointwise two-layer MLP
    let mut cfg = toy(&[2], 2, 1, vec![1], SwapMode::Parallel);
    cfg.ffn_kernel = 1;
    let (store, b, _, _) = block_instance(&cfg, 66);
    let z = [0.3, -0.7];
    let mut g = Graph::infer();
    let mv = g.constant(Tensor::from_fn(&[2, 2, 2, 2, 2], |i| z[i % 2]));
    let y = b.volumetric_ffn(&mut g, &store, mv).unwrap();
    let x = layer_norm(&z, 2, &p(&store, "blk.ffn_ln.gamma"), &p(&store, "blk.ffn_ln.beta"));
    let h: Vec<f64> = linear(&x, 1, 2, &p(&store, "blk.ffn1.w"), &p(&store, "blk.ffn1.b"), 4).into_iter().map(gelu).collect();
    let o = linear(&h, 1, 4, &p(&store, "blk.ffn2.w"), &p(&store, "blk.ffn2.b"), 2);
    let want: Vec<f64> = (0..32).map(|i| o[i % 2] + z[i % 2]).collect();
    assert!(max_diff(g.value(y).data(), &want) < 1e-12);
}

#[test]
fn zeroed_projections_make_the_block_an_identity() {
    let cfg = toy(&[4], 3, 1, vec![1], SwapMode::Parallel);
    let (mut store, b, m, app) = block_instance(&cfg, 67);
    store.zero_matching(OUTPUT_PROJECTIONS);
    let mut g = Graph::infer();
    let (mv, av) = (g.constant(m.clone()), g.constant(app));
    let y = b.forward(&mut g, &store, mv, av).unwrap();
    assert_eq!(g.value(y), &m);
}

#[test]
fn block_rejects_mismatched_grids() {
    let cfg = toy(&[4], 3, 1, vec![1], SwapMode::Parallel);
    let (store, b, m, _) = block_instance(&cfg, 68);
    let mut g = Graph::infer();
    let mv = g.constant(m);
    let bad_app = g.constant(Tensor::zeros(&[9, 3]));
    assert!(matches!(b.forward(&mut g, &store, mv, bad_app), Err(Error::Dimension(_))));
    let bad_m = g.constant(Tensor::zeros(&[4, 4, 4, 4, 2]));
    let app = g.constant(Tensor::zeros(&[16, 3]));
    assert!(matches!(b.forward(&mut g, &store, bad_m, app), Err(Error::Dimension(_))));
}

#[test]
fn conv_embedding_examples() {
    // reference pyramid 32/16/8 with one stride-2 stage each → 16/8/4
    let cfg = CatsppConfig::default();
    assert_eq!((0..3).map(|i| cfg.embedded_extent(i)).collect::<Vec<_>>(), vec![16, 8, 4]);
    assert_eq!(cfg.n_encoders, 1);
    assert_eq!(cfg.layers.iter().map(|l| l.q).collect::<Vec<_>>(), vec![3, 4, 5]);

    // 1⁴ identity channel map, stride 1: the embedding is GELU(input)
    let mut cfg = toy(&[4], 2, 1, vec![1], SwapMode::Parallel);
    cfg.layers[0].levels = 2;
    let mut store = ParamStore::<f64>::new();
    let pp = Catspp::new(&mut store, &mut rng(69), cfg).unwrap();
    store.get_mut("catspp.l3.embed0.w").unwrap().value = Tensor::new(&[1, 1, 1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x: Tensor<f64> = rand_tensor(&mut rng(70), &[4, 4, 4, 4, 2], 0.0, 1.0);
    let mut g = Graph::infer();
    let xv = g.constant(x.clone());
    let y = pp.embed(&mut g, &store, 0, xv).unwrap();
    let want: Vec<f64> = x.data().iter().map(|&v| gelu(v)).collect();
    assert!(max_diff(g.value(y).data(), &want) < 1e-15);

    // random 8⁴×2 with a 3⁴ stride-2 stage: brute-force conv + GELU
    let cfg = toy(&[8, 4], 3, 3, vec![2], SwapMode::Parallel);
    let mut store = ParamStore::<f64>::new();
    let pp = Catspp::new(&mut store, &mut rng(71), cfg).unwrap();
    perturbed(&mut store, 72);
    let x: Tensor<f64> = rand_tensor(&mut rng(73), &[8, 8, 8, 8, 2], 0.0, 1.0);
    let mut g = Graph::infer();
    let xv = g.constant(x.clone());
    let y = pp.embed(&mut g, &store, 0, xv).unwrap();
    assert_eq!(g.shape(y), &[4, 4, 4, 4, 3]);
    let (c, _) = conv(&store, "catspp.l3.embed0", x.data(), [8, 8, 8, 8, 2], [2; 4]);
    let want: Vec<f64> = c.into_iter().map(gelu).collect();
    assert!(max_diff(g.value(y).data(), &want) < 1e-5);

    // wrong channel count
    let mut g = Graph::infer();
    let bad = g.constant(Tensor::zeros(&[8, 8, 8, 8, 3]));
    assert!(matches!(pp.embed(&mut g, &store, 0, bad), Err(Error::Dimension(_))));
}

#[test]
fn config_validation() {
    // extent smaller than the embedding kernel
    let cfg = toy(&[2], 2, 3, vec![1], SwapMode::Parallel);
    assert!(matches!(Catspp::new(&mut ParamStore::<f32>::new(), &mut rng(74), cfg), Err(Error::Config(_))));
    // broken pyramid chain
    let cfg = toy(&[8, 8], 2, 1, vec![1], SwapMode::Parallel);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(CatsppConfig::default().validate().is_ok());
}

fn pyramid_instance(cfg: &CatsppConfig, seed: u64) -> (ParamStore<f64>, Catspp, Vec<Tensor<f64>>, Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let mut store = ParamStore::new();
    let pp = Catspp::new(&mut store, &mut rng(seed), cfg.clone()).unwrap();
    perturbed(&mut store, seed + 1);
    let mut r = rng(seed + 2);
    let hyper = cfg.layers.iter().map(|l| rand_tensor(&mut r, &[l.extent; 4].iter().copied().chain([l.levels]).collect::<Vec<_>>(), 0.0, 1.0)).collect();
    let feats = |r: &mut _| cfg.layers.iter().map(|l| rand_tensor(r, &[l.extent + 1, l.extent, l.app_channels], -1.0, 1.0)).collect::<Vec<_>>();
    let src = feats(&mut r);
    let tgt = feats(&mut r);
    (store, pp, hyper, src, tgt)
}

fn run_pyramid(store: &ParamStore<f64>, pp: &Catspp, hyper: &[Tensor<f64>], src: &[Tensor<f64>], tgt: &[Tensor<f64>]) -> Tensor<f64> {
    let mut g = Graph::infer();
    let h: Vec<Var> = hyper.iter().map(|t| g.constant(t.clone())).collect();
    let s: Vec<Var> = src.iter().map(|t| g.constant(t.clone())).collect();
    let t: Vec<Var> = tgt.iter().map(|t| g.constant(t.clone())).collect();
    let out = pp.aggregate(&mut g, store, &h, &s, &t).unwrap();
    g.value(out).clone()
}

#[test]
fn pyramid_matches_monolithic_oracle() {
    let cfg = toy(&[8, 4, 2], 2, 1, vec![1], SwapMode::Parallel);
    let (store, pp, hyper, src, tgt) = pyramid_instance(&cfg, 75);
    let got = run_pyramid(&store, &pp, &hyper, &src, &tgt);
    assert_eq!(got.shape(), &[8, 8, 8, 8, 2]);
    let want = pyramid_oracle(&store, &cfg, &hyper, &src, &tgt);
    let diff = max_diff(got.data(), &want);
    assert!(diff < 1e-5, "max diff {diff}");
}

#[test]
fn single_layer_is_one_parallel_block_pair() {
    let cfg = toy(&[4], 2, 1, vec![1], SwapMode::Parallel);
    let (store, pp, hyper, src, tgt) = pyramid_instance(&cfg, 76);
    let got = run_pyramid(&store, &pp, &hyper, &src, &tgt);
    let want = pyramid_oracle(&store, &cfg, &hyper, &src, &tgt);
    assert!(max_diff(got.data(), &want) < 1e-5);
}

#[test]
fn zeroed_projections_give_the_residual_cascade() {
    let cfg = toy(&[8, 4, 2], 2, 1, vec![1], SwapMode::Parallel);
    let (mut store, pp, hyper, src, tgt) = pyramid_instance(&cfg, 77);
    store.zero_matching(OUTPUT_PROJECTIONS);
    let got = run_pyramid(&store, &pp, &hyper, &src, &tgt);
    // embedded volumes, coarse ones upsampled and accumulated into finer ones
    let mut g = Graph::infer();
    let mut carry: Option<Var> = None;
    for i in (0..3).rev() {
        let h = g.constant(hyper[i].clone());
        let mut m = pp.embed(&mut g, &store, i, h).unwrap();
        if let Some(c) = carry {
            let up = g.upsample4d(c, 2).unwrap();
            m = g.add(up, m).unwrap();
        }
        carry = Some(m);
    }
    assert_eq!(&got, g.value(carry.unwrap()));
}

#[test]
fn parallel_branch_is_swap_equivariant() {
    let cfg = toy(&[8, 4, 2], 2, 1, vec![1], SwapMode::Parallel);
    let (store, pp, hyper, src, tgt) = pyramid_instance(&cfg, 78);
    let mut g = Graph::infer();
    let mut embedded = Vec::new();
    let (mut app_s, mut app_t) = (Vec::new(), Vec::new());
    for i in 0..3 {
        let h = g.constant(hyper[i].clone());
        embedded.push(pp.embed(&mut g, &store, i, h).unwrap());
        let s = g.constant(src[i].clone());
        let t = g.constant(tgt[i].clone());
        app_s.push(pp.appearance(&mut g, &store, i, s).unwrap());
        app_t.push(pp.appearance(&mut g, &store, i, t).unwrap());
    }
    let out = pp.aggregate_embedded(&mut g, &store, &embedded, &app_s, &app_t).unwrap();
    let swapped: Vec<Var> = embedded.iter().map(|&m| swap_in_graph(&mut g, m).unwrap()).collect();
    let out_sw = pp.aggregate_embedded(&mut g, &store, &swapped, &app_t, &app_s).unwrap();
    let back = swap_in_graph(&mut g, out_sw).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(back)) < 1e-5);
}

#[test]
fn serial_and_both_modes_run_and_differ() {
    let mut outs = Vec::new();
    for mode in [SwapMode::Serial, SwapMode::Parallel, SwapMode::Both] {
        let cfg = toy(&[4, 2], 2, 1, vec![1], mode);
        let (store, pp, hyper, src, tgt) = pyramid_instance(&cfg, 79);
        outs.push(run_pyramid(&store, &pp, &hyper, &src, &tgt));
    }
    assert!(outs[0].max_abs_diff(&outs[1]) > 1e-6);
    assert!(outs[1].max_abs_diff(&outs[2]) > 1e-6);
}

#[test]
fn efficient_block_is_far_smaller_than_a_standard_block() {
    // the standard-block count formula agrees with a built block
    for (f, r) in [(6usize, 2usize), (10, 1), (12, 3)] {
        let mut store = ParamStore::<f32>::new();
        TransformerBlock::new(&mut store, &mut rng(80), "std", f, 1, r).unwrap();
        assert_eq!(store.num_scalars(), standard_block_params(f, r));
    }
    // reference dims, finest layer: 256 tokens of 16·16·16 features
    let cfg = CatsppConfig::default();
    let mut store = ParamStore::<f32>::new();
    EfficientBlock::new(&mut store, &mut rng(81), "blk", &cfg, 0).unwrap();
    let n = cfg.embedded_extent(0);
    let standard = standard_block_params(n * n * n * n * cfg.d / (n * n), cfg.ffn_ratio);
    let ratio = store.num_scalars() as f64 / standard as f64;
    assert!(ratio <= 0.30, "ratio {ratio}");
}
