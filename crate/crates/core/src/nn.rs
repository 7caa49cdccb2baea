//! Parameterized layers shared by both aggregators.

use rand::Rng;

use crate::error::{cfg_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Name suffixes of every projection whose output feeds a residual sum.
/// Zeroing these turns each aggregator into its residual path.
pub const OUTPUT_PROJECTIONS: &[&str] = &[
    ".attn_out.w",
    ".attn_out.b",
    ".ffn2.w",
    ".ffn2.b",
    ".proj_out.w",
    ".proj_out.b",
    ".v_conv.w",
    ".v_conv.b",
    ".v_ln.beta",
];

#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Result<Self> {
        let (w, b) = (format!("{name}.w"), format!("{name}.b"));
        store.insert_fan_in(&w, &[inp, out], inp, rng)?;
        store.insert_zeros(&b, &[out])?;
        Ok(Linear { w, b, inp, out })
    }

    /// A linear layer starting at exactly zero output.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize) -> Result<Self> {
        let (w, b) = (format!("{name}.w"), format!("{name}.b"));
        store.insert_zeros(&w, &[inp, out])?;
        store.insert_zeros(&b, &[out])?;
        Ok(Linear { w, b, inp, out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.w)?;
        let b = g.param(store, &self.b)?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gamma: String,
    beta: String,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let (gamma, beta) = (format!("{name}.gamma"), format!("{name}.beta"));
        store.insert_ones(&gamma, &[dim])?;
        store.insert_zeros(&beta, &[dim])?;
        Ok(Norm { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// 4D convolution with bias over `[n1, n2, n3, n4, c]` volumes.
#[derive(Clone, Debug)]
pub struct Conv4d {
    w: String,
    b: String,
    pub stride: [usize; 4],
}

impl Conv4d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        kernel: [usize; 4],
        cin: usize,
        cout: usize,
        stride: [usize; 4],
    ) -> Result<Self> {
        let (w, b) = (format!("{name}.w"), format!("{name}.b"));
        let fan_in = kernel.iter().product::<usize>() * cin;
        store.insert_fan_in(&w, &[kernel[0], kernel[1], kernel[2], kernel[3], cin, cout], fan_in, rng)?;
        store.insert_zeros(&b, &[cout])?;
        Ok(Conv4d { w, b, stride })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.w)?;
        let b = g.param(store, &self.b)?;
        let y = g.conv4d(x, w, self.stride)?;
        g.add(y, b)
    }
}

/// Multi-head scaled dot-product self-attention over `[B, n, F]`.
///
/// Returns the attended values `[B, n, F]` (before the output projection)
/// and the attention probabilities `[B·heads, n, n]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let shape = g.shape(q).to_vec();
    let [b, n, f] = shape[..] else {
        return Err(dim_err!("attention expects [B, n, F], got {:?}", shape));
    };
    if heads == 0 || f % heads != 0 {
        return Err(cfg_err!("feature extent {f} is not divisible by {heads} heads"));
    }
    let dh = f / heads;
    let split = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, &[b, n, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, n, dh])
    };
    let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.bmm(qh, kh, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let o = g.bmm(attn, vh, false)?;
    let o = if heads == 1 {
        o
    } else {
        let o = g.reshape(o, &[b, heads, n, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        g.reshape(o, &[b, n, f])?
    };
    Ok((o, attn))
}

/// Pre-norm transformer encoder block:
///
/// ```text
/// Q, K, V = P_{Q,K,V}(LN(x));  ẑ = P_out(MHSA(Q, K, V))
/// z = ẑ + x;  y = P_ffn2(GELU(P_ffn1(LN(z)))) + z
/// ```
///
/// `x` already carries any positional embedding.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    attn_out: Linear,
    ln2: Norm,
    ffn1: Linear,
    ffn2: Linear,
    heads: usize,
    dim: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(cfg_err!("{name}: feature extent {dim} is not divisible by {heads} heads"));
        }
        let hidden = dim * ffn_ratio.max(1);
        Ok(TransformerBlock {
            ln1: Norm::new(store, &format!("{name}.ln1"), dim)?,
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim)?,
            attn_out: Linear::new(store, rng, &format!("{name}.attn_out"), dim, dim)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), dim)?,
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), dim, hidden)?,
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), hidden, dim)?,
            heads,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, store, x)?.0)
    }

    /// Like [`forward`](Self::forward), also returning the attention
    /// probabilities.
    pub fn forward_with_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        if g.shape(x).last() != Some(&self.dim) {
            return Err(dim_err!("transformer block expects feature extent {}, got {:?}", self.dim, g.shape(x)));
        }
        let h = self.ln1.forward(g, store, x)?;
        let q = self.q.forward(g, store, h)?;
        let k = self.k.forward(g, store, h)?;
        let v = self.v.forward(g, store, h)?;
        let (o, attn) = multi_head_attention(g, q, k, v, self.heads)?;
        let o = self.attn_out.forward(g, store, o)?;
        let z = g.add(o, x)?;
        let h = self.ln2.forward(g, store, z)?;
        let h = self.ffn1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.ffn2.forward(g, store, h)?;
        Ok((g.add(h, z)?, attn))
    }
}
