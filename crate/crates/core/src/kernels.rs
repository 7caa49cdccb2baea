//! Raw numeric kernels behind the graph ops. Every reduction runs in a fixed
//! order so results are bit-stable from run to run.

use crate::tensor::{lit, numel, strides, Scalar};

/// `c (+)= op(a) · op(b)` where `op(a)` is `[m × k]` and `op(b)` is `[k × n]`,
/// all row-major. `ta`/`tb` mean the stored buffer is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn permute<T: Copy>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let r = shape.len();
    if r <= 1 {
        return x.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner = out_shape[r - 1];
    let inner_stride = st[r - 1];
    let outer = numel(&out_shape[..r - 1]);
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            base += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..n {
                mx = mx.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - mx).exp();
                y[at(j)] = e;
                sum = sum + e;
            }
            // Subnormal probabilities are flushed: they carry no usable mass
            // and slow every later product on x86 by an order of magnitude.
            let inv = T::one() / sum;
            let tiny = T::min_positive_value();
            for j in 0..n {
                let p = y[at(j)] * inv;
                y[at(j)] = if p < tiny { T::zero() } else { p };
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], g: &[T], shape: &[usize], axis: usize, dx: &mut [T]) {
    let (outer, n, inner) = split_axis(shape, axis);
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot = dot + g[at(j)] * y[at(j)];
            }
            for j in 0..n {
                dx[at(j)] = dx[at(j)] + y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
}

/// Layer norm over rows of width `f`. Returns the output and per-row
/// `(mean, rstd)` pairs.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    f: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / f;
    let mut y = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(2 * rows);
    let nf = T::from_f64(f as f64);
    for r in 0..rows {
        let xs = &x[r * f..(r + 1) * f];
        let mut sum = T::zero();
        for &v in xs {
            sum = sum + v;
        }
        let mean = sum / nf;
        let mut var = T::zero();
        for &v in xs {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / nf;
        let rstd = T::one() / (var + eps).sqrt();
        let ys = &mut y[r * f..(r + 1) * f];
        for j in 0..f {
            ys[j] = (xs[j] - mean) * rstd * gamma[j] + beta[j];
        }
        stats.push(mean);
        stats.push(rstd);
    }
    (y, stats)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    f: usize,
    gamma: &[T],
    stats: &[T],
    g: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let rows = x.len() / f;
    let nf = T::from_f64(f as f64);
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let mut dxhat = vec![T::zero(); f];
    for r in 0..rows {
        let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
        let xs = &x[r * f..(r + 1) * f];
        let gs = &g[r * f..(r + 1) * f];
        if let Some(dg) = dgamma.as_deref_mut() {
            for j in 0..f {
                dg[j] = dg[j] + gs[j] * (xs[j] - mean) * rstd;
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for j in 0..f {
                db[j] = db[j] + gs[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for j in 0..f {
                let xh = (xs[j] - mean) * rstd;
                dxhat[j] = gs[j] * gamma[j];
                m1 = m1 + dxhat[j];
                m2 = m2 + dxhat[j] * xh;
            }
            m1 = m1 / nf;
            m2 = m2 / nf;
            let dxs = &mut dx[r * f..(r + 1) * f];
            for j in 0..f {
                let xh = (xs[j] - mean) * rstd;
                dxs[j] = dxs[j] + rstd * (dxhat[j] - m1 - xh * m2);
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact GELU, `x · Φ(x)`.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    x * lit::<T>(0.5) * (T::one() + (x * lit(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = lit::<T>(0.5) * (T::one() + (x * lit(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * lit(0.5)).exp() * lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Geometry of a zero-padded "same" 4D convolution over
/// `[n1, n2, n3, n4, cin]` with a `[k1, k2, k3, k4, cin, cout]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv4dGeom {
    pub input: [usize; 4],
    pub cin: usize,
    pub kernel: [usize; 4],
    pub cout: usize,
    pub stride: [usize; 4],
    pub output: [usize; 4],
}

impl Conv4dGeom {
    pub fn new(input: [usize; 4], cin: usize, kernel: [usize; 4], cout: usize, stride: [usize; 4]) -> Self {
        let output = std::array::from_fn(|a| input[a].div_ceil(stride[a]));
        Conv4dGeom { input, cin, kernel, cout, stride, output }
    }

    fn pad(&self, a: usize) -> usize {
        self.kernel[a] / 2
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    fn slab_rows(&self) -> usize {
        self.output[1] * self.output[2] * self.output[3]
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product::<usize>() * self.cout
    }

    /// Input index along axis `a` for output `o` and tap `t`, if in bounds.
    #[inline]
    fn src(&self, a: usize, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride[a] + t) as isize - self.pad(a) as isize;
        (i >= 0 && (i as usize) < self.input[a]).then_some(i as usize)
    }

    /// Visits every (cols segment, input segment) pair of the im2col matrix
    /// for output slab `o1`. Segments cover the contiguous axis-4 taps.
    fn for_each_segment(&self, o1: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [_, n2, n3, n4] = self.input;
        let [k1, k2, k3, k4] = self.kernel;
        let cin = self.cin;
        let taps = self.taps();
        let (s4, p4) = (self.stride[3], self.pad(3));
        let mut row = 0;
        for o2 in 0..self.output[1] {
            for o3 in 0..self.output[2] {
                for o4 in 0..self.output[3] {
                    let start = o4 * s4;
                    let lo = p4.saturating_sub(start);
                    let hi = k4.min(n4 + p4 - start);
                    let row_base = row * taps;
                    for t1 in 0..k1 {
                        let Some(i1) = self.src(0, o1, t1) else { continue };
                        for t2 in 0..k2 {
                            let Some(i2) = self.src(1, o2, t2) else { continue };
                            for t3 in 0..k3 {
                                let Some(i3) = self.src(2, o3, t3) else { continue };
                                if lo >= hi {
                                    continue;
                                }
                                let col = row_base + (((t1 * k2 + t2) * k3 + t3) * k4 + lo) * cin;
                                let i4 = start + lo - p4;
                                let src = (((i1 * n2 + i2) * n3 + i3) * n4 + i4) * cin;
                                f(col, src, (hi - lo) * cin);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], o1: usize, cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_segment(o1, |col, src, len| {
            cols[col..col + len].copy_from_slice(&x[src..src + len]);
        });
    }

    fn col2im_add<T: Scalar>(&self, dcols: &[T], o1: usize, dx: &mut [T]) {
        self.for_each_segment(o1, |col, src, len| {
            for (d, &c) in dx[src..src + len].iter_mut().zip(&dcols[col..col + len]) {
                *d = *d + c;
            }
        });
    }
}

pub(crate) fn conv4d_forward<T: Scalar>(x: &[T], w: &[T], geom: &Conv4dGeom) -> Vec<T> {
    let rows = geom.slab_rows();
    let taps = geom.taps();
    let mut out = vec![T::zero(); geom.out_len()];
    let mut cols = vec![T::zero(); rows * taps];
    for o1 in 0..geom.output[0] {
        geom.im2col(x, o1, &mut cols);
        let dst = &mut out[o1 * rows * geom.cout..(o1 + 1) * rows * geom.cout];
        gemm(rows, taps, geom.cout, &cols, false, w, false, dst, false);
    }
    out
}

pub(crate) fn conv4d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    geom: &Conv4dGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let rows = geom.slab_rows();
    let taps = geom.taps();
    let mut cols = vec![T::zero(); rows * taps];
    for o1 in 0..geom.output[0] {
        let gs = &g[o1 * rows * geom.cout..(o1 + 1) * rows * geom.cout];
        if let Some(dw) = dw.as_deref_mut() {
            geom.im2col(x, o1, &mut cols);
            gemm(taps, rows, geom.cout, &cols, true, gs, false, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(rows, geom.cout, taps, gs, false, w, true, &mut cols, false);
            geom.col2im_add(&cols, o1, dx);
        }
    }
}

/// Interpolation taps `(i0, i1, w0, w1)` for a half-pixel linear resize of
/// an axis from `n_in` to `n_out` samples (edge-clamped).
pub(crate) fn linear_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            (i0, i1, lit(1.0 - w1), lit(w1))
        })
        .collect()
}

pub(crate) fn resample_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize, n_out: usize) -> Vec<T> {
    let (outer, n_in, inner) = split_axis(shape, axis);
    let taps = linear_taps::<T>(n_in, n_out);
    let mut y = Vec::with_capacity(outer * n_out * inner);
    for o in 0..outer {
        let base = o * n_in * inner;
        for &(i0, i1, w0, w1) in &taps {
            let r0 = &x[base + i0 * inner..base + (i0 + 1) * inner];
            let r1 = &x[base + i1 * inner..base + (i1 + 1) * inner];
            y.extend(r0.iter().zip(r1).map(|(&a, &b)| a * w0 + b * w1));
        }
    }
    y
}

pub(crate) fn resample_backward<T: Scalar>(
    g: &[T],
    in_shape: &[usize],
    axis: usize,
    n_out: usize,
    dx: &mut [T],
) {
    let (outer, n_in, inner) = split_axis(in_shape, axis);
    let taps = linear_taps::<T>(n_in, n_out);
    for o in 0..outer {
        let ib = o * n_in * inner;
        let ob = o * n_out * inner;
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            for i in 0..inner {
                let gv = g[ob + j * inner + i];
                dx[ib + i0 * inner + i] = dx[ib + i0 * inner + i] + gv * w0;
                dx[ib + i1 * inner + i] = dx[ib + i1 * inner + i] + gv * w1;
            }
        }
    }
}


/// Puts the calling thread's float unit in flush-to-zero / denormals-are-zero
/// mode. Subnormals show up once attention saturates and make every product
/// that touches them several times slower; no value this crate computes
/// depends on them. A no-op off x86-64.
pub fn flush_subnormals() {
    #[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
    #[allow(deprecated)]
    // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) flags are set; both are
    // supported by every x86-64 processor.
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}
