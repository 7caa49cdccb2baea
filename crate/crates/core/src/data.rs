//! Synthetic image pairs related by an affine warp, with exact dense
//! ground-truth flow.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::flow::{cell_center, FlowField, KeypointSet};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};
use crate::text::{content_lines, parent_dir, Fields};

pub const IMAGE_SIZE: usize = 128;
const MAX_ATTEMPTS: u64 = 10;
const MIN_IN_BOUNDS: f64 = 0.8;

/// `t = A·s + b` in pixel coordinates (pixel `(x, y)` covers
/// `[x, x+1) × [y, y+1)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: [[1.0, 0.0], [0.0, 1.0]], b: [0.0, 0.0] };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Affine { b: [dx, dy], ..Self::IDENTITY }
    }

    /// Scale `s` and rotation `theta` (radians) about `center`, then a
    /// translation.
    pub fn similarity(scale: f64, theta: f64, center: (f64, f64), shift: (f64, f64)) -> Self {
        let (c, s) = (theta.cos() * scale, theta.sin() * scale);
        let a = [[c, -s], [s, c]];
        let b = [
            center.0 - a[0][0] * center.0 - a[0][1] * center.1 + shift.0,
            center.1 - a[1][0] * center.0 - a[1][1] * center.1 + shift.1,
        ];
        Affine { a, b }
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.b[0],
            self.a[1][0] * x + self.a[1][1] * y + self.b[1],
        )
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if det.abs() < 1e-3 {
            return Err(arg_err!("affine warp is near-singular (det {det})"));
        }
        let ia = [[self.a[1][1] / det, -self.a[0][1] / det], [-self.a[1][0] / det, self.a[0][0] / det]];
        let b = [
            -(ia[0][0] * self.b[0] + ia[0][1] * self.b[1]),
            -(ia[1][0] * self.b[0] + ia[1][1] * self.b[1]),
        ];
        Ok(Affine { a: ia, b })
    }

    /// The 2×3 matrix `[A | b]`, row-major.
    pub fn to_matrix(&self) -> [f64; 6] {
        [self.a[0][0], self.a[0][1], self.b[0], self.a[1][0], self.a[1][1], self.b[1]]
    }
}

/// Analytic flow of `warp` at the cell centres of an `h × w` grid over a
/// `height × width` image, in grid cells.
pub fn analytic_flow(warp: &Affine, grid: (usize, usize), height: f64, width: f64) -> FlowField {
    let (h, w) = grid;
    let (cx, cy) = (width / w as f64, height / h as f64);
    let mut t = Tensor::zeros(&[h, w, 2]);
    for v in 0..h {
        for u in 0..w {
            let (x, y) = cell_center(u as f64, v as f64, grid, height, width);
            let (tx, ty) = warp.apply(x, y);
            t.set(&[v, u, 0], (tx - x) / cx);
            t.set(&[v, u, 1], (ty - y) / cy);
        }
    }
    FlowField { grid: t }
}

/// Sums low-resolution random grids of several sizes, each bilinearly
/// upsampled, into a smooth `size × size × 3` image in roughly `[-1, 1]`.
fn smooth_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f32> {
    let mut img = vec![0.0f64; size * size * 3];
    for (cells, weight) in [(4usize, 1.0), (8, 0.5), (16, 0.25)] {
        let base: Vec<f64> = (0..cells * cells * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scale = cells as f64 / size as f64;
        for y in 0..size {
            let gy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (cells - 1) as f64);
            let (y0, fy) = (gy.floor() as usize, gy.fract());
            let y1 = (y0 + 1).min(cells - 1);
            for x in 0..size {
                let gx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (cells - 1) as f64);
                let (x0, fx) = (gx.floor() as usize, gx.fract());
                let x1 = (x0 + 1).min(cells - 1);
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| base[(yy * cells + xx) * 3 + c];
                    let v = (at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx) * (1.0 - fy)
                        + (at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx) * fy;
                    img[(y * size + x) * 3 + c] += weight * v;
                }
            }
        }
    }
    Tensor::new(&[size, size, 3], img.into_iter().map(|v| v as f32).collect()).expect("image shape")
}

/// `target(p) = source(warp⁻¹(p))`, bilinear, zero outside the source.
pub fn warp_image(src: &Tensor<f32>, warp: &Affine) -> Result<Tensor<f32>> {
    let (h, w, c) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let inv = warp.inverse()?;
    let mut out = Tensor::zeros(&[h, w, c]);
    let sample = |x: isize, y: isize, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src.at(&[y as usize, x as usize, ch]) as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (sample(x0, y0, ch) * (1.0 - ax) + sample(x0 + 1, y0, ch) * ax) * (1.0 - ay)
                    + (sample(x0, y0 + 1, ch) * (1.0 - ax) + sample(x0 + 1, y0 + 1, ch) * ax) * ay;
                out.set(&[y, x, ch], v as f32);
            }
        }
    }
    Ok(out)
}

/// A source image, its warped target and the exact warp.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub warp: Affine,
    pub seed: u64,
}

impl SyntheticPair {
    pub fn size(&self) -> (f64, f64) {
        (self.source.shape()[0] as f64, self.source.shape()[1] as f64)
    }

    /// Ground-truth flow at an arbitrary grid resolution, evaluated from the
    /// warp itself rather than resampled from another level.
    pub fn gt_flow(&self, grid: (usize, usize)) -> FlowField {
        let (h, w) = self.size();
        analytic_flow(&self.warp, grid, h, w)
    }

    pub fn record(&self, grid: (usize, usize)) -> PairRecord {
        PairRecord {
            source: self.source.clone(),
            target: self.target.clone(),
            flow: self.gt_flow(grid),
            seed: self.seed,
        }
    }
}

/// Draws a random similarity warp whose size is controlled by `magnitude`
/// (1.0: scale within [0.8, 1.25], rotation within ±20°, shift within ±10%).
fn random_warp(rng: &mut ChaCha8Rng, size: f64, magnitude: f64) -> Affine {
    let log_s = rng.gen_range(-1.0..=1.0) * 1.25f64.ln() * magnitude;
    let scale = log_s.exp().clamp(0.8f64.powf(magnitude), 1.25f64.powf(magnitude));
    let theta = rng.gen_range(-1.0..=1.0) * 20f64.to_radians() * magnitude;
    let shift = (
        rng.gen_range(-1.0..=1.0) * 0.1 * size * magnitude,
        rng.gen_range(-1.0..=1.0) * 0.1 * size * magnitude,
    );
    Affine::similarity(scale, theta, (size / 2.0, size / 2.0), shift)
}

fn in_bounds_fraction(warp: &Affine, size: f64, grid: usize) -> f64 {
    let flow = analytic_flow(warp, (grid, grid), size, size);
    valid_cells(&flow).iter().filter(|&&b| b).count() as f64 / (grid * grid) as f64
}

/// Generates a pair with a random warp. Warps that are near-singular or
/// leave fewer than 80% of grid cells inside the target are redrawn.
pub fn generate_pair(seed: u64, magnitude: f64, grid: usize) -> Result<SyntheticPair> {
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(arg_err!("warp magnitude must lie in [0, 1], got {magnitude}"));
    }
    let size = IMAGE_SIZE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = smooth_image(&mut rng, IMAGE_SIZE);
    for _ in 0..MAX_ATTEMPTS {
        let warp = random_warp(&mut rng, size, magnitude);
        if warp.det().abs() < 1e-3 || in_bounds_fraction(&warp, size, grid) < MIN_IN_BOUNDS {
            continue;
        }
        let target = warp_image(&source, &warp)?;
        return Ok(SyntheticPair { source, target, warp, seed });
    }
    Err(Error::Numeric(format!("seed {seed}: no acceptable warp after {MAX_ATTEMPTS} attempts")))
}

/// A pair with a caller-chosen warp.
pub fn generate_pair_with_warp(seed: u64, warp: Affine) -> Result<SyntheticPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = smooth_image(&mut rng, IMAGE_SIZE);
    let target = warp_image(&source, &warp)?;
    Ok(SyntheticPair { source, target, warp, seed })
}

/// Cells whose ground-truth target lies inside the grid's coordinate hull,
/// i.e. where a soft-argmax prediction can be exact.
pub fn valid_cells(flow: &FlowField) -> Vec<bool> {
    let (h, w) = flow.resolution();
    let mut out = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let (dx, dy) = flow.at(v, u);
            let (tx, ty) = (u as f64 + dx, v as f64 + dy);
            out.push((0.0..=(w - 1) as f64).contains(&tx) && (0.0..=(h - 1) as f64).contains(&ty));
        }
    }
    out
}

/// The unit stored on disk and consumed by training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    /// Ground-truth flow at the evaluation grid.
    pub flow: FlowField,
    pub seed: u64,
}

impl PairRecord {
    pub fn image_size(&self) -> (f64, f64) {
        (self.source.shape()[0] as f64, self.source.shape()[1] as f64)
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        valid_cells(&self.flow)
    }

    /// Source keypoints at the cell centres whose ground-truth target lies
    /// inside the target image, with those targets.
    pub fn keypoints(&self) -> Result<(KeypointSet, KeypointSet)> {
        let (height, width) = self.image_size();
        let grid = self.flow.resolution();
        let (cx, cy) = (width / grid.1 as f64, height / grid.0 as f64);
        let (mut src, mut tgt) = (Vec::new(), Vec::new());
        for v in 0..grid.0 {
            for u in 0..grid.1 {
                let (x, y) = cell_center(u as f64, v as f64, grid, height, width);
                let (dx, dy) = self.flow.at(v, u);
                let (tx, ty) = (x + dx * cx, y + dy * cy);
                if (0.0..width).contains(&tx) && (0.0..height).contains(&ty) {
                    src.push((x, y));
                    tgt.push((tx, ty));
                }
            }
        }
        Ok((KeypointSet::new(src, height, width)?, KeypointSet::new(tgt, height, width)?))
    }
}

/// One manifest entry: `src=<path> tgt=<path> flow=<path> seed=<n>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub flow: PathBuf,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<PairRecord> {
        Ok(PairRecord {
            source: read_tensor_file(&self.src)?.into_f32(),
            target: read_tensor_file(&self.tgt)?.into_f32(),
            flow: FlowField::new(read_tensor_file(&self.flow)?.into_f64()).map_err(|e| Error::Load(e.to_string()))?,
            seed: self.seed,
        })
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = parent_dir(path);
    content_lines(&text)
        .map(|(n, line)| {
            let f = Fields::parse(n, line)?;
            Ok(ManifestEntry {
                src: f.path("src", &base)?,
                tgt: f.path("tgt", &base)?,
                flow: f.path("flow", &base)?,
                seed: f.num("seed")?,
            })
        })
        .collect()
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    read_manifest(manifest)?.iter().map(ManifestEntry::load).collect()
}

/// Writes `n` pairs with seeds `seed, seed+1, ...` plus `manifest.txt`
/// into `dir`. Manifest paths are relative to `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, n: usize, seed: u64, magnitude: f64, grid: usize) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for i in 0..n {
        let s = seed + i as u64;
        let pair = generate_pair(s, magnitude, grid)?;
        let names = [format!("pair{i:04}_src.catt"), format!("pair{i:04}_tgt.catt"), format!("pair{i:04}_flow.catt")];
        write_tensor_file(dir.join(&names[0]), &pair.source)?;
        write_tensor_file(dir.join(&names[1]), &pair.target)?;
        write_tensor_file(dir.join(&names[2]), &pair.gt_flow((grid, grid)).grid)?;
        manifest.push_str(&format!("src={} tgt={} flow={} seed={s}\n", names[0], names[1], names[2]));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest)?;
    Ok(path)
}
