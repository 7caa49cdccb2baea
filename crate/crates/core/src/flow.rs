//! Soft-argmax flow, keypoint transfer and the AEPE / PCK metrics.
//!
//! Flow is measured in grid cells as `(Δx, Δy)`; grid cell `(u, v)` has its
//! centre at pixel `((u + 0.5)·W/w, (v + 0.5)·H/h)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use crate::text::content_lines;

/// Inverse temperature applied to cosine-scale scores.
pub const DEFAULT_BETA: f64 = 20.0;

/// A dense displacement field `[h, w, 2]` in grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub grid: Tensor<f64>,
}

impl FlowField {
    pub fn new(grid: Tensor<f64>) -> Result<Self> {
        match grid.shape() {
            &[_, _, 2] => Ok(FlowField { grid }),
            s => Err(dim_err!("flow field must be [h, w, 2], got {:?}", s)),
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { grid: Tensor::zeros(&[h, w, 2]) }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn at(&self, v: usize, u: usize) -> (f64, f64) {
        (self.grid.at(&[v, u, 0]), self.grid.at(&[v, u, 1]))
    }

    /// Bilinear sample at fractional grid coordinates, clamped to the grid.
    pub fn sample(&self, gx: f64, gy: f64) -> (f64, f64) {
        let (h, w) = self.resolution();
        let gx = gx.clamp(0.0, (w - 1) as f64);
        let gy = gy.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let top = self.grid.at(&[y0, x0, k]) * (1.0 - fx) + self.grid.at(&[y0, x1, k]) * fx;
            let bot = self.grid.at(&[y1, x0, k]) * (1.0 - fx) + self.grid.at(&[y1, x1, k]) * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
        (out[0], out[1])
    }
}

/// Cell coordinates `(x, y) = (u, v)` of an `h × w` grid, `[hw, 2]`.
pub fn grid_positions<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h * w, 2], |i| {
        let (cell, k) = (i / 2, i % 2);
        T::from_f64(if k == 0 { (cell % w) as f64 } else { (cell / w) as f64 })
    })
}

/// `F(i) = Σ_j softmax_j(β·C(i, ·)) pos(j) − pos(i)` for scores
/// `[h·w, h·w]` (rows are source cells) or a `[h, w, h, w]`-shaped volume.
/// Returns `[h, w, 2]`.
pub fn soft_argmax_in_graph<T: Scalar>(g: &mut Graph<T>, c: Var, grid: (usize, usize), beta: f64) -> Result<Var> {
    let (h, w) = grid;
    let n = h * w;
    if g.value(c).len() != n * n {
        return Err(dim_err!("scores {:?} do not cover a {h}x{w} grid pair", g.shape(c)));
    }
    if beta <= 0.0 || !beta.is_finite() {
        return Err(arg_err!("soft-argmax inverse temperature must be positive, got {beta}"));
    }
    if !g.value(c).all_finite() {
        return Err(Error::Numeric("non-finite correlation scores reached the flow head".into()));
    }
    let c = g.reshape(c, &[n, n])?;
    let scaled = g.scale(c, beta);
    let p = g.softmax(scaled, 1)?;
    let pos = g.constant(grid_positions(h, w));
    let expected = g.matmul(p, pos)?;
    let flow = g.sub(expected, pos)?;
    g.reshape(flow, &[h, w, 2])
}

pub fn soft_argmax_flow<T: Scalar>(c: &Tensor<T>, grid: (usize, usize), beta: f64) -> Result<FlowField> {
    let mut g = Graph::infer();
    let cv = g.constant(c.clone());
    let f = soft_argmax_in_graph(&mut g, cv, grid, beta)?;
    FlowField::new(g.value(f).cast())
}

/// Winner-takes-all flow: hard argmax per row (first maximum on ties).
pub fn argmax_flow<T: Scalar>(c: &Tensor<T>, grid: (usize, usize)) -> Result<FlowField> {
    let (h, w) = grid;
    let n = h * w;
    if c.len() != n * n {
        return Err(dim_err!("scores {:?} do not cover a {h}x{w} grid pair", c.shape()));
    }
    if !c.all_finite() {
        return Err(Error::Numeric("non-finite correlation scores".into()));
    }
    let mut out = Tensor::zeros(&[h, w, 2]);
    for (i, row) in c.data().chunks_exact(n).enumerate() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        let (dx, dy) = ((best % w) as f64 - (i % w) as f64, (best / w) as f64 - (i / w) as f64);
        out.set(&[i / w, i % w, 0], dx);
        out.set(&[i / w, i % w, 1], dy);
    }
    FlowField::new(out)
}

/// Mean endpoint error over the cells selected by `mask` (all cells when
/// `None`), as a rank-0 graph value. The gradient at zero error is zero.
pub fn aepe_in_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var, mask: Option<&[bool]>) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) || g.shape(pred).last() != Some(&2) {
        return Err(dim_err!("aepe: resolutions {:?} and {:?} differ", g.shape(pred), g.shape(gt)));
    }
    let diff = g.sub(pred, gt)?;
    let dist = g.norm_last(diff)?;
    let cells = g.value(dist).len();
    let (dist, count) = match mask {
        None => (dist, cells),
        Some(m) => {
            if m.len() != cells {
                return Err(dim_err!("aepe: mask of {} cells for {cells} cells", m.len()));
            }
            let count = m.iter().filter(|&&b| b).count();
            if count == 0 {
                return Err(arg_err!("aepe: mask selects no cells"));
            }
            let mt = Tensor::new(g.shape(dist), m.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?;
            let mv = g.constant(mt);
            (g.mul(dist, mv)?, count)
        }
    };
    let s = g.sum(dist);
    Ok(g.scale(s, 1.0 / count as f64))
}

pub fn aepe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    aepe_masked(pred, gt, None)
}

pub fn aepe_masked(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64> {
    let mut g = Graph::<f64>::infer();
    let (p, t) = (g.constant(pred.grid.clone()), g.constant(gt.grid.clone()));
    let e = aepe_in_graph(&mut g, p, t, mask)?;
    Ok(g.value(e).item())
}

/// Mean of `v` with a plain left-to-right sum.
pub(crate) fn mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<(f64, f64)>,
    pub height: f64,
    pub width: f64,
}

impl KeypointSet {
    pub fn new(points: Vec<(f64, f64)>, height: f64, width: f64) -> Result<Self> {
        if let Some(p) = points.iter().find(|(x, y)| !(0.0..width).contains(x) || !(0.0..height).contains(y)) {
            return Err(arg_err!("keypoint {:?} lies outside the {height}x{width} image", p));
        }
        Ok(KeypointSet { points, height, width })
    }

    /// Text form: a `H W` header, then one `x y` line per point.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.height, self.width);
        for (x, y) in &self.points {
            let _ = writeln!(s, "{x:?} {y:?}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let nums = |n: usize, l: &str| -> Result<(f64, f64)> {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Load(format!("line {n}: expected two numbers, got `{l}`")))?;
            match v[..] {
                [a, b] => Ok((a, b)),
                _ => Err(Error::Load(format!("line {n}: expected two numbers, got `{l}`"))),
            }
        };
        let (n, header) = lines.next().ok_or_else(|| Error::Load("empty keypoint file".into()))?;
        let (h, w) = nums(n, header)?;
        let points = lines.map(|(n, l)| nums(n, l)).collect::<Result<Vec<_>>>()?;
        KeypointSet::new(points, h, w).map_err(|e| Error::Load(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Pixel centre of grid cell `(u, v)`.
pub fn cell_center(u: f64, v: f64, grid: (usize, usize), height: f64, width: f64) -> (f64, f64) {
    ((u + 0.5) * width / grid.1 as f64, (v + 0.5) * height / grid.0 as f64)
}

/// Moves each keypoint by the flow bilinearly sampled at its grid position.
/// Transferred points may leave the image; they are not clamped.
pub fn transfer_keypoints(f: &FlowField, k: &KeypointSet) -> Result<Vec<(f64, f64)>> {
    let (h, w) = f.resolution();
    let (sx, sy) = (w as f64 / k.width, h as f64 / k.height);
    k.points
        .iter()
        .map(|&(x, y)| {
            if !(0.0..k.width).contains(&x) || !(0.0..k.height).contains(&y) {
                return Err(arg_err!("keypoint ({x}, {y}) lies outside the image"));
            }
            let (gx, gy) = (x * sx - 0.5, y * sy - 0.5);
            let (dx, dy) = f.sample(gx, gy);
            Ok(((gx + dx + 0.5) / sx, (gy + dy + 0.5) / sy))
        })
        .collect()
}

/// Threshold basis for PCK.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PckBasis {
    /// `α · max(H, W)` of the image.
    Image { height: f64, width: f64 },
    /// `α · max(h, w)` of an object bounding box.
    BBox { height: f64, width: f64 },
}

impl PckBasis {
    fn extent(self) -> f64 {
        match self {
            PckBasis::Image { height, width } | PckBasis::BBox { height, width } => height.max(width),
        }
    }
}

/// Fraction of predictions within `α · max(H, W)` of their ground truth.
pub fn pck(pred: &[(f64, f64)], gt: &[(f64, f64)], alpha: f64, basis: PckBasis) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(arg_err!("pck: {} predictions for {} ground-truth points", pred.len(), gt.len()));
    }
    if alpha <= 0.0 {
        return Err(arg_err!("pck: alpha must be positive, got {alpha}"));
    }
    if gt.is_empty() {
        return Err(arg_err!("pck: no keypoints"));
    }
    let thr = alpha * basis.extent();
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|((px, py), (gx, gy))| ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() <= thr)
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Scores `[h_s, w_s, h_t, w_t, c]` averaged over channels into `[hw, hw]`.
pub fn channel_mean<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    if s.len() != 5 {
        return Err(dim_err!("channel mean expects a rank-5 volume, got {:?}", s));
    }
    let m = g.mean_axis(v, 4)?;
    g.reshape(m, &[s[0] * s[1], s[2] * s[3]])
}

