//! Independent f64 reference implementations used as test oracles. Written
//! with plain loops over row-major slices; nothing here calls the graph.
#![allow(dead_code)]

use catagg::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<T: catagg::Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from(rng.gen_range(lo..hi)).unwrap())
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn to_f64<T: catagg::Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

/// Parameter value as f64.
pub fn p<T: catagg::Scalar>(store: &ParamStore<T>, name: &str) -> Vec<f64> {
    to_f64(store.value(name).unwrap_or_else(|e| panic!("{name}: {e}")))
}

/// Randomizes every parameter (including zero-initialized ones).
pub fn randomize<T: catagg::Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, prm) in store.iter_mut() {
        for v in prm.value.data_mut() {
            *v = T::from(r.gen_range(-scale..scale)).unwrap();
        }
    }
}

/// `x [m, k] · w [k, n] + b [n]`.
pub fn linear(x: &[f64], m: usize, k: usize, w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = b[j];
            for t in 0..k {
                acc += x[i * k + t] * w[t * n + j];
            }
            y[i * n + j] = acc;
        }
    }
    y
}

pub fn layer_norm(x: &[f64], f: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (r, row) in x.chunks(f).enumerate() {
        let mean = row.iter().sum::<f64>() / f as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..f {
            y[r * f + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Dense multi-head attention over `n` tokens of width `f`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, f: usize, fv: usize, heads: usize) -> Vec<f64> {
    let (dh, dv) = (f / heads, fv / heads);
    let mut out = vec![0.0; n * fv];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|t| q[i * f + h * dh + t] * k[j * f + h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for (j, aj) in a.iter().enumerate() {
                for t in 0..dv {
                    out[i * fv + h * dv + t] += aj * v[j * fv + h * dv + t];
                }
            }
        }
    }
    out
}

/// Pre-LN transformer block `name` on `x [n, f]`.
pub fn block<T: catagg::Scalar>(store: &ParamStore<T>, name: &str, x: &[f64], n: usize, f: usize, heads: usize) -> Vec<f64> {
    let pr = |s: &str| p(store, &format!("{name}.{s}"));
    let h = layer_norm(x, f, &pr("ln1.gamma"), &pr("ln1.beta"));
    let q = linear(&h, n, f, &pr("q.w"), &pr("q.b"), f);
    let k = linear(&h, n, f, &pr("k.w"), &pr("k.b"), f);
    let v = linear(&h, n, f, &pr("v.w"), &pr("v.b"), f);
    let o = attention(&q, &k, &v, n, f, f, heads);
    let o = linear(&o, n, f, &pr("attn_out.w"), &pr("attn_out.b"), f);
    let z: Vec<f64> = o.iter().zip(x).map(|(a, b)| a + b).collect();
    let h = layer_norm(&z, f, &pr("ln2.gamma"), &pr("ln2.beta"));
    let hidden = pr("ffn1.b").len();
    let h: Vec<f64> = linear(&h, n, f, &pr("ffn1.w"), &pr("ffn1.b"), hidden).into_iter().map(gelu).collect();
    let h = linear(&h, n, hidden, &pr("ffn2.w"), &pr("ffn2.b"), f);
    h.iter().zip(&z).map(|(a, b)| a + b).collect()
}

/// Brute-force zero-padded "same" 4D cross-correlation.
pub fn conv4d(x: &[f64], s: [usize; 5], k: &[f64], ks: [usize; 6], stride: [usize; 4]) -> (Vec<f64>, [usize; 5]) {
    let (cin, cout) = (s[4], ks[5]);
    let o: Vec<usize> = (0..4).map(|a| s[a].div_ceil(stride[a])).collect();
    let os = [o[0], o[1], o[2], o[3], cout];
    let mut out = vec![0.0; os.iter().product()];
    let xi = |p: [usize; 4], c: usize| (((p[0] * s[1] + p[1]) * s[2] + p[2]) * s[3] + p[3]) * cin + c;
    let ki = |t: [usize; 4], ci: usize, co: usize| ((((t[0] * ks[1] + t[1]) * ks[2] + t[2]) * ks[3] + t[3]) * cin + ci) * cout + co;
    let mut idx = 0;
    for a in 0..o[0] {
        for b in 0..o[1] {
            for c in 0..o[2] {
                for d in 0..o[3] {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for i in 0..ks[0] {
                            for j in 0..ks[1] {
                                for l in 0..ks[2] {
                                    for m in 0..ks[3] {
                                        let pos = [
                                            (a * stride[0] + i) as isize - (ks[0] / 2) as isize,
                                            (b * stride[1] + j) as isize - (ks[1] / 2) as isize,
                                            (c * stride[2] + l) as isize - (ks[2] / 2) as isize,
                                            (d * stride[3] + m) as isize - (ks[3] / 2) as isize,
                                        ];
                                        if (0..4).any(|q| pos[q] < 0 || pos[q] >= s[q] as isize) {
                                            continue;
                                        }
                                        let pu = [pos[0] as usize, pos[1] as usize, pos[2] as usize, pos[3] as usize];
                                        for ci in 0..cin {
                                            acc += x[xi(pu, ci)] * k[ki([i, j, l, m], ci, co)];
                                        }
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    (out, os)
}

/// Half-pixel, edge-clamped linear interpolation weights from `n_in` to `n_out`.
pub fn lerp_weights(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let mut w = vec![0.0; n_in];
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            w[i0] += 1.0 - (src - i0 as f64);
            w[i1] += src - i0 as f64;
            w
        })
        .collect()
}

/// Bilinear resize of `[h, w, c]` to `[ho, wo, c]`.
pub fn resize2d(x: &[f64], h: usize, w: usize, c: usize, ho: usize, wo: usize) -> Vec<f64> {
    let (wy, wx) = (lerp_weights(h, ho), lerp_weights(w, wo));
    let mut out = vec![0.0; ho * wo * c];
    for i in 0..ho {
        for j in 0..wo {
            for y in 0..h {
                for x0 in 0..w {
                    let wt = wy[i][y] * wx[j][x0];
                    if wt != 0.0 {
                        for ch in 0..c {
                            out[(i * wo + j) * c + ch] += wt * x[(y * w + x0) * c + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Factor-2 bilinear upsampling of `[n, n, n, n, c]` applied as a 4D
/// tensor-product interpolation.
pub fn upsample4d(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let m = 2 * n;
    let w = lerp_weights(n, m);
    let mut out = vec![0.0; m * m * m * m * c];
    let mut idx = 0;
    for a in 0..m {
        for b in 0..m {
            for cc in 0..m {
                for d in 0..m {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                for k in 0..n {
                                    for l in 0..n {
                                        let wt = w[a][i] * w[b][j] * w[cc][k] * w[d][l];
                                        if wt != 0.0 {
                                            acc += wt * x[(((i * n + j) * n + k) * n + l) * c + ch];
                                        }
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// Cosine similarity clamped at zero; zero vectors give 0.
pub fn cosine_relu(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).max(0.0)
    }
}

/// Correlation `[hw, hw]` of two `[h, w, c]` maps, rows = first map.
pub fn correlation(a: &[f64], b: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = cosine_relu(&a[i * c..(i + 1) * c], &b[j * c..(j + 1) * c]);
        }
    }
    out
}
