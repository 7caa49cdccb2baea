//! Correlation stacks, hypercorrelations and the source/target swap.

use std::fs;
use std::path::Path;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{read_tensor_file, Scalar, Tensor};
use crate::text::{content_lines, parent_dir, Fields};

/// Which image's positions index the rows (tokens) of a correlation map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenAxis {
    Source,
    Target,
}

impl TokenAxis {
    pub fn flip(self) -> Self {
        match self {
            TokenAxis::Source => TokenAxis::Target,
            TokenAxis::Target => TokenAxis::Source,
        }
    }
}

/// One backbone feature map `[h, w, c]` tagged with its level index and
/// pyramid layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub level: usize,
    pub layer: usize,
    pub grid: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(level: usize, layer: usize, grid: Tensor<T>) -> Result<Self> {
        match grid.shape() {
            &[h, w, c] if h >= 2 && w >= 2 && c >= 1 => Ok(FeatureMap { level, layer, grid }),
            s => Err(dim_err!("feature map must be [h >= 2, w >= 2, c >= 1], got {:?}", s)),
        }
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }
}

/// `L` correlation maps `[L, hw_rows, hw_cols]` on a shared `h × w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationStack<T> {
    pub maps: Tensor<T>,
    pub grid: (usize, usize),
    pub token_axis: TokenAxis,
}

impl<T: Scalar> CorrelationStack<T> {
    pub fn new(maps: Tensor<T>, grid: (usize, usize), token_axis: TokenAxis) -> Result<Self> {
        let hw = grid.0 * grid.1;
        match maps.shape() {
            &[l, r, c] if l >= 1 && r == hw && c == hw => Ok(CorrelationStack { maps, grid, token_axis }),
            s => Err(dim_err!("stack of {:?} does not fit a {}x{} grid", s, grid.0, grid.1)),
        }
    }

    pub fn levels(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn level(&self, l: usize) -> Tensor<T> {
        let n = self.maps.shape()[1] * self.maps.shape()[2];
        let s = &self.maps.shape()[1..];
        Tensor::new(s, self.maps.data()[l * n..(l + 1) * n].to_vec()).expect("slice of stack")
    }

    /// `Cᵀ(i, j) = C(j, i)` per level; flips the token axis.
    pub fn swap(&self) -> Self {
        let maps = Tensor::new(self.maps.shape(), transpose_levels(self.maps.data(), self.maps.shape()))
            .expect("square maps");
        CorrelationStack { maps, grid: self.grid, token_axis: self.token_axis.flip() }
    }
}

fn transpose_levels<T: Copy>(x: &[T], shape: &[usize]) -> Vec<T> {
    crate::kernels::permute(x, shape, &[0, 2, 1])
}

/// All correlation maps of one pyramid layer, stacked on the channel axis:
/// `[h_s, w_s, h_t, w_t, |levels|]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypercorrelation<T> {
    pub layer: usize,
    pub levels: Vec<usize>,
    pub volume: Tensor<T>,
}

impl<T: Scalar> Hypercorrelation<T> {
    /// Exchanges the `(h_s, w_s)` and `(h_t, w_t)` axis pairs.
    pub fn swap(&self) -> Self {
        let perm = [2, 3, 0, 1, 4];
        let s = self.volume.shape();
        let data = crate::kernels::permute(self.volume.data(), s, &perm);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        Hypercorrelation {
            layer: self.layer,
            levels: self.levels.clone(),
            volume: Tensor::new(&shape, data).expect("permuted volume"),
        }
    }
}

/// `ReLU(cos(ds(i), dt(j)))` for maps `[h_s, w_s, c]`, `[h_t, w_t, c]`,
/// giving `[h_s·w_s, h_t·w_t]`. Zero-norm vectors give zero rows/columns.
pub fn correlate<T: Scalar>(g: &mut Graph<T>, ds: Var, dt: Var) -> Result<Var> {
    let (ss, st) = (g.shape(ds).to_vec(), g.shape(dt).to_vec());
    if ss.len() != 3 || st.len() != 3 {
        return Err(dim_err!("correlation expects [h, w, c] maps, got {:?} and {:?}", ss, st));
    }
    if ss[2] != st[2] {
        return Err(dim_err!("correlation channel mismatch: {} vs {}", ss[2], st[2]));
    }
    let (ns, nt, c) = (ss[0] * ss[1], st[0] * st[1], ss[2]);
    let a = g.normalize_l2(ds)?;
    let b = g.normalize_l2(dt)?;
    let a = g.reshape(a, &[1, ns, c])?;
    let b = g.reshape(b, &[1, nt, c])?;
    let dot = g.bmm(a, b, true)?;
    let dot = g.reshape(dot, &[ns, nt])?;
    Ok(g.relu(dot))
}

pub fn cosine_correlation<T: Scalar>(ds: &FeatureMap<T>, dt: &FeatureMap<T>) -> Result<Tensor<T>> {
    let mut g = Graph::infer();
    let (a, b) = (g.constant(ds.grid.clone()), g.constant(dt.grid.clone()));
    let c = correlate(&mut g, a, b)?;
    Ok(g.value(c).clone())
}

/// A correlation stack built inside a graph, together with the resized
/// (un-normalized) features it was computed from.
#[derive(Clone, Debug)]
pub struct StackVars {
    /// `[L, hw, hw]`, rows indexing source positions.
    pub corr: Var,
    pub src: Vec<Var>,
    pub tgt: Vec<Var>,
}

pub fn stack_in_graph<T: Scalar>(g: &mut Graph<T>, src: &[Var], tgt: &[Var], h: usize, w: usize) -> Result<StackVars> {
    if src.is_empty() || src.len() != tgt.len() {
        return Err(arg_err!("stack needs matching non-empty feature lists, got {} and {}", src.len(), tgt.len()));
    }
    let mut maps = Vec::with_capacity(src.len());
    let (mut rs, mut rt) = (Vec::new(), Vec::new());
    for (&s, &t) in src.iter().zip(tgt) {
        for &v in &[s, t] {
            let sh = g.shape(v);
            if sh.len() != 3 || sh[0] < h || sh[1] < w {
                return Err(dim_err!("feature map {:?} is smaller than the {h}x{w} working grid", sh));
            }
        }
        let s = g.resize2d(s, h, w)?;
        let t = g.resize2d(t, h, w)?;
        let c = correlate(g, s, t)?;
        maps.push(g.reshape(c, &[1, h * w, h * w])?);
        rs.push(s);
        rt.push(t);
    }
    let corr = if maps.len() == 1 { maps[0] } else { g.concat(&maps, 0)? };
    Ok(StackVars { corr, src: rs, tgt: rt })
}

/// Resizes every level to `grid`, correlates, and stacks the `L` maps.
pub fn build_stack<T: Scalar>(
    src: &[FeatureMap<T>],
    tgt: &[FeatureMap<T>],
    grid: (usize, usize),
) -> Result<CorrelationStack<T>> {
    let mut g = Graph::infer();
    let s: Vec<Var> = src.iter().map(|f| g.constant(f.grid.clone())).collect();
    let t: Vec<Var> = tgt.iter().map(|f| g.constant(f.grid.clone())).collect();
    let sv = stack_in_graph(&mut g, &s, &t, grid.0, grid.1)?;
    CorrelationStack::new(g.value(sv.corr).clone(), grid, TokenAxis::Source)
}

/// Hypercorrelation members of one pyramid layer: the `(src, tgt)` feature
/// pairs tagged with that layer.
pub fn hyper_in_graph<T: Scalar>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    let (first_s, first_t) = *pairs.first().ok_or_else(|| arg_err!("pyramid layer has no member maps"))?;
    let (ss, st) = (g.shape(first_s).to_vec(), g.shape(first_t).to_vec());
    let mut chans = Vec::with_capacity(pairs.len());
    for &(s, t) in pairs {
        if g.shape(s)[..2] != ss[..2] || g.shape(t)[..2] != st[..2] {
            return Err(dim_err!("pyramid layer mixes spatial extents {:?} and {:?}", g.shape(s), ss));
        }
        let c = correlate(g, s, t)?;
        chans.push(g.reshape(c, &[ss[0], ss[1], st[0], st[1], 1])?);
    }
    if chans.len() == 1 {
        Ok(chans[0])
    } else {
        g.concat(&chans, 4)
    }
}

/// Groups feature maps by pyramid layer and builds one hypercorrelation per
/// requested layer, in the order given.
pub fn build_hypercorrelation<T: Scalar>(
    src: &[FeatureMap<T>],
    tgt: &[FeatureMap<T>],
    layers: &[usize],
) -> Result<Vec<Hypercorrelation<T>>> {
    if src.len() != tgt.len() {
        return Err(arg_err!("{} source maps vs {} target maps", src.len(), tgt.len()));
    }
    let mut out = Vec::with_capacity(layers.len());
    for &q in layers {
        let mut g = Graph::infer();
        let mut pairs = Vec::new();
        let mut levels = Vec::new();
        for (s, t) in src.iter().zip(tgt) {
            if s.layer != t.layer || s.level != t.level {
                return Err(arg_err!("source/target maps are not aligned by level"));
            }
            if s.layer == q {
                pairs.push((g.constant(s.grid.clone()), g.constant(t.grid.clone())));
                levels.push(s.level);
            }
        }
        if pairs.is_empty() {
            return Err(arg_err!("pyramid layer {q} has no member maps"));
        }
        let v = hyper_in_graph(&mut g, &pairs)?;
        out.push(Hypercorrelation { layer: q, levels, volume: g.value(v).clone() });
    }
    Ok(out)
}

/// Swaps source and target axes of a stack `[L, n, n]` or a volume
/// `[h_s, w_s, h_t, w_t, c]` inside a graph.
pub fn swap_in_graph<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    match g.shape(v).len() {
        3 => g.permute(v, &[0, 2, 1]),
        5 => g.permute(v, &[2, 3, 0, 1, 4]),
        r => Err(dim_err!("swap expects a rank-3 stack or rank-5 volume, got rank {r}")),
    }
}

/// Reads a feature manifest of `level=<l> layer=<q> file=<path>` lines.
/// Relative paths resolve against the manifest's directory.
pub fn load_feature_manifest(path: impl AsRef<Path>) -> Result<Vec<FeatureMap<f32>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = parent_dir(path);
    let mut maps = Vec::new();
    for (n, line) in content_lines(&text) {
        let f = Fields::parse(n, line)?;
        let grid = read_tensor_file(f.path("file", &base)?)?.into_f32();
        let map = FeatureMap::new(f.num("level")?, f.num("layer")?, grid)
            .map_err(|e| Error::Load(format!("{}:{n}: {e}", path.display())))?;
        maps.push(map);
    }
    if maps.is_empty() {
        return Err(Error::Load(format!("{}: no feature maps listed", path.display())));
    }
    Ok(maps)
}
