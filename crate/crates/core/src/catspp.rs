//! The efficient convolution + transformer aggregator with pyramidal
//! coarse-to-fine processing.
//!
//! Volumes are `[h_s, w_s, h_t, w_t, channels]`. Inside a block the tokens
//! are target positions and the (strided) source positions × channels are
//! flattened into each token's features.

use rand::Rng;

use crate::cats::SwapMode;
use crate::correlation::swap_in_graph;
use crate::error::{arg_err, cfg_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{multi_head_attention, Conv4d, Linear, Norm};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const PREFIX: &str = "catspp";

/// Inputs of one pyramid layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    /// Pyramid layer index `q`.
    pub q: usize,
    /// Native (square) spatial extent of the layer's feature maps.
    pub extent: usize,
    /// Number of correlation maps `|L^q|` in the layer's hypercorrelation.
    pub levels: usize,
    /// Channels of the feature map used for the appearance embedding.
    pub app_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatsppConfig {
    /// Pyramid layers, finest first.
    pub layers: Vec<LayerSpec>,
    /// Embedded channel count `d`.
    pub d: usize,
    pub embed_kernel: usize,
    /// Stride of each embedding stage; one conv4d + GELU per entry.
    pub embed_strides: Vec<usize>,
    /// Source-axis stride `s` of the query/key convolutions.
    pub proj_stride: usize,
    pub proj_kernel: usize,
    pub attn_dim: usize,
    pub ffn_ratio: usize,
    pub ffn_kernel: usize,
    pub n_encoders: usize,
    pub appearance_dim: usize,
    pub mode: SwapMode,
}

impl Default for CatsppConfig {
    fn default() -> Self {
        CatsppConfig {
            layers: vec![
                LayerSpec { q: 3, extent: 32, levels: 2, app_channels: 16 },
                LayerSpec { q: 4, extent: 16, levels: 2, app_channels: 32 },
                LayerSpec { q: 5, extent: 8, levels: 2, app_channels: 32 },
            ],
            d: 16,
            embed_kernel: 3,
            embed_strides: vec![2],
            proj_stride: 2,
            proj_kernel: 3,
            attn_dim: 128,
            ffn_ratio: 2,
            ffn_kernel: 3,
            n_encoders: 1,
            appearance_dim: 128,
            mode: SwapMode::Parallel,
        }
    }
}

impl CatsppConfig {
    /// Spatial extent of layer `i` after the embedding stages.
    pub fn embedded_extent(&self, i: usize) -> usize {
        self.embed_strides.iter().fold(self.layers[i].extent, |n, &s| n.div_ceil(s))
    }

    /// Extent of the source axes after the query/key convolution.
    pub fn reduced_extent(&self, i: usize) -> usize {
        self.embedded_extent(i).div_ceil(self.proj_stride)
    }

    /// Flattened per-token correlation features entering `P_Q` / `P_K`.
    pub fn qk_features(&self, i: usize) -> usize {
        self.reduced_extent(i).pow(2) * self.d + self.appearance_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(cfg_err!("at least one pyramid layer is required"));
        }
        if [self.d, self.attn_dim, self.ffn_ratio, self.n_encoders, self.appearance_dim, self.proj_stride]
            .contains(&0)
        {
            return Err(cfg_err!("d, attn_dim, ffn_ratio, n_encoders, appearance_dim and proj_stride must be >= 1"));
        }
        for k in [self.embed_kernel, self.proj_kernel, self.ffn_kernel] {
            if k % 2 == 0 {
                return Err(cfg_err!("kernel extent {k} must be odd"));
            }
        }
        if self.embed_strides.contains(&0) {
            return Err(cfg_err!("embedding strides must be >= 1"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.levels == 0 || l.app_channels == 0 {
                return Err(cfg_err!("layer q={} needs at least one level and one channel", l.q));
            }
            if l.extent < self.embed_kernel {
                return Err(cfg_err!(
                    "layer q={} extent {} is smaller than the embedding kernel {}",
                    l.q,
                    l.extent,
                    self.embed_kernel
                ));
            }
            if i > 0 {
                if self.layers[i - 1].q >= l.q {
                    return Err(cfg_err!("layers must be listed finest first with increasing q"));
                }
                let (fine, coarse) = (self.embedded_extent(i - 1), self.embedded_extent(i));
                if 2 * coarse != fine {
                    return Err(cfg_err!(
                        "embedded extents break the pyramid chain: q={} has {coarse}, q={} has {fine}",
                        l.q,
                        self.layers[i - 1].q
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One efficient transformer block acting on an embedded volume.
#[derive(Clone, Debug)]
pub struct EfficientBlock {
    ln_m: Norm,
    q_conv: Conv4d,
    q_ln: Norm,
    q_proj: Linear,
    k_conv: Conv4d,
    k_ln: Norm,
    k_proj: Linear,
    v_conv: Conv4d,
    v_ln: Norm,
    pos: String,
    ffn_ln: Norm,
    ffn1: Conv4d,
    ffn2: Conv4d,
    extent: usize,
    d: usize,
}

impl EfficientBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &CatsppConfig,
        layer: usize,
    ) -> Result<Self> {
        let (n, d) = (cfg.embedded_extent(layer), cfg.d);
        let (pk, fk) = ([cfg.proj_kernel; 4], [cfg.ffn_kernel; 4]);
        let s = cfg.proj_stride;
        let qk_stride = [s, s, 1, 1];
        let pos = format!("{name}.pos");
        store.insert_zeros(&pos, &[n * n, cfg.attn_dim])?;
        Ok(EfficientBlock {
            ln_m: Norm::new(store, &format!("{name}.ln_m"), d)?,
            q_conv: Conv4d::new(store, rng, &format!("{name}.q_conv"), pk, d, d, qk_stride)?,
            q_ln: Norm::new(store, &format!("{name}.q_ln"), d)?,
            q_proj: Linear::new(store, rng, &format!("{name}.q_proj"), cfg.qk_features(layer), cfg.attn_dim)?,
            k_conv: Conv4d::new(store, rng, &format!("{name}.k_conv"), pk, d, d, qk_stride)?,
            k_ln: Norm::new(store, &format!("{name}.k_ln"), d)?,
            k_proj: Linear::new(store, rng, &format!("{name}.k_proj"), cfg.qk_features(layer), cfg.attn_dim)?,
            v_conv: Conv4d::new(store, rng, &format!("{name}.v_conv"), pk, d, d, [1; 4])?,
            v_ln: Norm::new(store, &format!("{name}.v_ln"), d)?,
            pos,
            ffn_ln: Norm::new(store, &format!("{name}.ffn_ln"), d)?,
            ffn1: Conv4d::new(store, rng, &format!("{name}.ffn1"), fk, d, d * cfg.ffn_ratio, [1; 4])?,
            ffn2: Conv4d::new(store, rng, &format!("{name}.ffn2"), fk, d * cfg.ffn_ratio, d, [1; 4])?,
            extent: n,
            d,
        })
    }

    /// Flattens `[a, b, n, n, c]` into target tokens `[n·n, a·b·c]`.
    fn tokens<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
        let s = g.shape(v).to_vec();
        let t = g.permute(v, &[2, 3, 0, 1, 4])?;
        g.reshape(t, &[s[2] * s[3], s[0] * s[1] * s[4]])
    }

    /// `P([LN(conv(LN(M))), P(D)]) + E_pos` for the query or key path.
    #[allow(clippy::too_many_arguments)]
    fn qk<T: Scalar>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m_ln: Var,
        conv: &Conv4d,
        ln: &Norm,
        proj: &Linear,
        app: Var,
        pos: Var,
    ) -> Result<Var> {
        let x = conv.forward(g, store, m_ln)?;
        let x = ln.forward(g, store, x)?;
        let x = Self::tokens(g, x)?;
        let x = g.concat(&[x, app], 1)?;
        let x = proj.forward(g, store, x)?;
        g.add(x, pos)
    }

    /// The query, key and value of the block: `([N, a], [N, a], [N, F])`.
    pub fn qkv<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, m: Var, app: Var) -> Result<(Var, Var, Var)> {
        let n = self.extent;
        if g.shape(m) != [n, n, n, n, self.d] {
            return Err(dim_err!("block expects [{n}, {n}, {n}, {n}, {}], got {:?}", self.d, g.shape(m)));
        }
        if g.shape(app).first() != Some(&(n * n)) {
            return Err(dim_err!("appearance {:?} does not cover the {n}x{n} token grid", g.shape(app)));
        }
        let m_ln = self.ln_m.forward(g, store, m)?;
        let pos = g.param(store, &self.pos)?;
        let q = Self::qk(g, store, m_ln, &self.q_conv, &self.q_ln, &self.q_proj, app, pos)?;
        let k = Self::qk(g, store, m_ln, &self.k_conv, &self.k_ln, &self.k_proj, app, pos)?;
        let v = self.v_conv.forward(g, store, m_ln)?;
        let v = self.v_ln.forward(g, store, v)?;
        let v = Self::tokens(g, v)?;
        Ok((q, k, v))
    }

    /// `y = Q₂(GELU(Q₁(LN(z)))) + z`.
    pub fn volumetric_ffn<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let x = self.ffn_ln.forward(g, store, z)?;
        let x = self.ffn1.forward(g, store, x)?;
        let x = g.gelu(x);
        let x = self.ffn2.forward(g, store, x)?;
        g.add(x, z)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, m: Var, app: Var) -> Result<Var> {
        let n = self.extent;
        let (q, k, v) = self.qkv(g, store, m, app)?;
        let shape = |g: &Graph<T>, x: Var| g.shape(x).to_vec();
        let (sq, sv) = (shape(g, q), shape(g, v));
        let q = g.reshape(q, &[1, sq[0], sq[1]])?;
        let k = g.reshape(k, &[1, sq[0], sq[1]])?;
        let v = g.reshape(v, &[1, sv[0], sv[1]])?;
        let (z, _) = multi_head_attention(g, q, k, v, 1)?;
        let z = g.reshape(z, &[n, n, n, n, self.d])?;
        // tokens were target positions: back to [h_s, w_s, h_t, w_t, d]
        let z = g.permute(z, &[2, 3, 0, 1, 4])?;
        let z = g.add(z, m)?;
        self.volumetric_ffn(g, store, z)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    embed: Vec<Conv4d>,
    appearance: Linear,
    blocks: Vec<EfficientBlock>,
}

#[derive(Clone, Debug)]
pub struct Catspp {
    cfg: CatsppConfig,
    layers: Vec<Layer>,
}

impl Catspp {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: CatsppConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for (i, spec) in cfg.layers.iter().enumerate() {
            let base = format!("{PREFIX}.l{}", spec.q);
            let k = [cfg.embed_kernel; 4];
            let embed = cfg
                .embed_strides
                .iter()
                .enumerate()
                .map(|(j, &s)| {
                    let cin = if j == 0 { spec.levels } else { cfg.d };
                    Conv4d::new(store, rng, &format!("{base}.embed{j}"), k, cin, cfg.d, [s; 4])
                })
                .collect::<Result<_>>()?;
            let appearance = Linear::new(store, rng, &format!("{base}.app"), spec.app_channels, cfg.appearance_dim)?;
            let blocks = (0..cfg.n_encoders)
                .map(|e| EfficientBlock::new(store, rng, &format!("{base}.enc{e}"), &cfg, i))
                .collect::<Result<_>>()?;
            layers.push(Layer { embed, appearance, blocks });
        }
        Ok(Catspp { cfg, layers })
    }

    pub fn config(&self) -> &CatsppConfig {
        &self.cfg
    }

    pub fn block(&self, layer: usize, encoder: usize) -> &EfficientBlock {
        &self.layers[layer].blocks[encoder]
    }

    /// Conv embedding of layer `i`: `[n, n, n, n, |L^q|] -> [n', n', n', n', d]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, i: usize, hyper: Var) -> Result<Var> {
        let spec = &self.cfg.layers[i];
        let n = spec.extent;
        if g.shape(hyper) != [n, n, n, n, spec.levels] {
            return Err(dim_err!(
                "layer q={} expects hypercorrelation [{n}, {n}, {n}, {n}, {}], got {:?}",
                spec.q,
                spec.levels,
                g.shape(hyper)
            ));
        }
        let mut x = hyper;
        for conv in &self.layers[i].embed {
            let y = conv.forward(g, store, x)?;
            x = g.gelu(y);
        }
        Ok(x)
    }

    /// `P^q(D)`: resizes `[h, w, c]` to the embedded grid of layer `i` and
    /// projects to `[n'·n', p]`.
    pub fn appearance<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, i: usize, d: Var) -> Result<Var> {
        let n = self.cfg.embedded_extent(i);
        let s = g.shape(d).to_vec();
        if s.len() != 3 || s[2] != self.cfg.layers[i].app_channels {
            return Err(dim_err!(
                "layer q={} expects [h, w, {}] appearance features, got {:?}",
                self.cfg.layers[i].q,
                self.cfg.layers[i].app_channels,
                s
            ));
        }
        let r = g.resize2d(d, n, n)?;
        let r = g.reshape(r, &[n * n, s[2]])?;
        self.layers[i].appearance.forward(g, store, r)
    }

    /// `T₊^q`: the stacked efficient blocks of layer `i`.
    pub fn transform<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, i: usize, m: Var, app: Var) -> Result<Var> {
        let mut x = m;
        for b in &self.layers[i].blocks {
            x = b.forward(g, store, x, app)?;
        }
        Ok(x)
    }

    /// Aggregates one layer's embedded volume in both orientations.
    fn orient<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        i: usize,
        m: Var,
        app_s: Var,
        app_t: Var,
    ) -> Result<Var> {
        let parallel = |g: &mut Graph<T>, m: Var| -> Result<Var> {
            let a = self.transform(g, store, i, m, app_t)?;
            let mt = swap_in_graph(g, m)?;
            let b = self.transform(g, store, i, mt, app_s)?;
            let b = swap_in_graph(g, b)?;
            let sum = g.add(a, b)?;
            Ok(g.scale(sum, 0.5))
        };
        let serial = |g: &mut Graph<T>, m: Var| -> Result<Var> {
            let s = self.transform(g, store, i, m, app_t)?;
            let st = swap_in_graph(g, s)?;
            let c = self.transform(g, store, i, st, app_s)?;
            swap_in_graph(g, c)
        };
        match self.cfg.mode {
            SwapMode::Parallel => parallel(g, m),
            SwapMode::Serial => serial(g, m),
            SwapMode::Both => {
                let s = serial(g, m)?;
                parallel(g, s)
            }
        }
    }

    /// Coarse-to-fine cascade over already embedded volumes (finest first,
    /// matching the config) with per-layer appearance embeddings of both
    /// images. Returns the finest aggregated volume.
    pub fn aggregate_embedded<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embedded: &[Var],
        app_s: &[Var],
        app_t: &[Var],
    ) -> Result<Var> {
        let n = self.cfg.layers.len();
        if embedded.len() != n || app_s.len() != n || app_t.len() != n {
            return Err(arg_err!("expected {n} embedded volumes and appearance embeddings per image"));
        }
        let mut carry: Option<Var> = None;
        for i in (0..n).rev() {
            let mut m = embedded[i];
            if let Some(c) = carry {
                let up = g.upsample4d(c, 2)?;
                if g.shape(up) != g.shape(m) {
                    return Err(cfg_err!(
                        "upsampled volume {:?} does not match layer q={} volume {:?}",
                        g.shape(up),
                        self.cfg.layers[i].q,
                        g.shape(m)
                    ));
                }
                m = g.add(up, m)?;
            }
            carry = Some(self.orient(g, store, i, m, app_s[i], app_t[i])?);
        }
        Ok(carry.expect("at least one layer"))
    }

    /// Full path from hypercorrelations (finest first) and each layer's
    /// appearance features for both images.
    pub fn aggregate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        hyper: &[Var],
        src: &[Var],
        tgt: &[Var],
    ) -> Result<Var> {
        let n = self.cfg.layers.len();
        if hyper.len() != n || src.len() != n || tgt.len() != n {
            return Err(arg_err!("expected {n} hypercorrelations and appearance maps per image"));
        }
        let mut embedded = Vec::with_capacity(n);
        let (mut app_s, mut app_t) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            embedded.push(self.embed(g, store, i, hyper[i])?);
            app_s.push(self.appearance(g, store, i, src[i])?);
            app_t.push(self.appearance(g, store, i, tgt[i])?);
        }
        self.aggregate_embedded(g, store, &embedded, &app_s, &app_t)
    }
}
