use super::{Graph, Op, Var};
use crate::error::{arg_err, dim_err, Result};
use crate::kernels::{self, Conv4dGeom};
use crate::tensor::{lit, numel, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    /// `a [.., k] · b [k, n] -> [.., n]`; leading axes of `a` are flattened
    /// into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().expect("rank >= 1") = n;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_op(t, Op::MatMul { a, b }, &[a, b], Vec::new()))
    }

    /// Batched product `a [B, m, k] · b [B, k, n]`, or `· b[B, n, k]^T`
    /// with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("bmm: incompatible shapes {:?} and {:?}", sa, sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err!("bmm: inner extents differ in {:?} and {:?}", sa, sb));
        }
        let mut out = vec![T::zero(); bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for t in 0..bs {
            kernels::gemm(
                m,
                k,
                n,
                &av[t * m * k..(t + 1) * m * k],
                false,
                &bv[t * k * n..(t + 1) * k * n],
                trans_b,
                &mut out[t * m * n..(t + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push_op(t, Op::Bmm { a, b, trans_b }, &[a, b], Vec::new()))
    }

    /// `a + b`, where `b` may match a trailing suffix of `a`'s shape and is
    /// then repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err!("add: {:?} does not broadcast onto {:?}", sb, sa));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(nb) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o = *o + v;
            }
        }
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push_op(t, Op::Add { a, b }, &[a, b], Vec::new()))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push_op(t, Op::Sub { a, b }, &[a, b], Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push_op(t, Op::Mul { a, b }, &[a, b], Vec::new()))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv: T = lit(c);
        let out = self.value(a).data().iter().map(|&x| x * cv).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        self.push_op(t, Op::Scale { a, c }, &[a], Vec::new())
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let x = self.value(a).data();
        let out = match kind {
            Activation::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Gelu => x.iter().map(|&v| kernels::gelu(v)).collect(),
        };
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        self.push_op(t, Op::Act { a, kind }, &[a], Vec::new())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax: axis {axis} out of range for {:?}", shape));
        }
        if shape[axis] == 0 {
            return Err(dim_err!("softmax: empty axis {axis} in {:?}", shape));
        }
        let out = kernels::softmax_forward(self.value(a).data(), &shape, axis);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_op(t, Op::Softmax { a, axis }, &[a], Vec::new()))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let f = shape.last().copied().unwrap_or(0);
        if f == 0 {
            return Err(dim_err!("layer_norm: feature extent is 0 in {:?}", shape));
        }
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(dim_err!(
                "layer_norm: gamma {:?} / beta {:?} must have extent {f}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (y, stats) = kernels::layer_norm_forward(
            self.value(a).data(),
            f,
            self.value(gamma).data(),
            self.value(beta).data(),
            lit(LN_EPS),
        );
        let t = Tensor::new(&shape, y)?;
        Ok(self.push_op(t, Op::LayerNorm { a, gamma, beta }, &[a, gamma, beta], stats))
    }

    /// Zero-padded "same" 4D cross-correlation.
    ///
    /// `x` is `[n1, n2, n3, n4, cin]`, `kernel` is `[k1, k2, k3, k4, cin, cout]`
    /// with odd extents; output extents are `ceil(n / stride)` per axis.
    pub fn conv4d(&mut self, x: Var, kernel: Var, stride: [usize; 4]) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 5 || sk.len() != 6 {
            return Err(dim_err!("conv4d: expected rank-5 input and rank-6 kernel, got {:?} and {:?}", sx, sk));
        }
        if sk[4] != sx[4] {
            return Err(dim_err!("conv4d: kernel expects {} input channels, input has {}", sk[4], sx[4]));
        }
        if sk[..4].iter().any(|&k| k % 2 == 0) {
            return Err(arg_err!("conv4d: kernel extents {:?} must be odd", &sk[..4]));
        }
        if stride.contains(&0) {
            return Err(arg_err!("conv4d: strides {:?} must be >= 1", stride));
        }
        let geom = Conv4dGeom::new(
            [sx[0], sx[1], sx[2], sx[3]],
            sx[4],
            [sk[0], sk[1], sk[2], sk[3]],
            sk[5],
            stride,
        );
        let out = kernels::conv4d_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        let o = geom.output;
        let t = Tensor::new(&[o[0], o[1], o[2], o[3], geom.cout], out)?;
        Ok(self.push_op(t, Op::Conv4d { x, k: kernel, geom }, &[x, kernel], Vec::new()))
    }

    /// Half-pixel linear resize of one axis to `n_out` samples.
    pub fn resample(&mut self, a: Var, axis: usize, n_out: usize) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 || n_out == 0 {
            return Err(dim_err!("resample: cannot resize axis {axis} of {:?} to {n_out}", shape));
        }
        if shape[axis] == n_out {
            return Ok(a);
        }
        let out = kernels::resample_forward(self.value(a).data(), &shape, axis, n_out);
        shape[axis] = n_out;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_op(t, Op::Resample { a, axis }, &[a], Vec::new()))
    }

    /// Bilinear resize of an `[h, w, c]` map to `[h_out, w_out, c]`.
    pub fn resize2d(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        if self.shape(a).len() != 3 {
            return Err(dim_err!("resize2d: expected [h, w, c], got {:?}", self.shape(a)));
        }
        let r = self.resample(a, 0, h)?;
        self.resample(r, 1, w)
    }

    /// Separable bilinear upsampling of `[h1, w1, h2, w2, c]` by an integer
    /// factor: first the `(h1, w1)` pair, then `(h2, w2)`.
    pub fn upsample4d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 5 {
            return Err(dim_err!("upsample4d: expected rank 5, got {:?}", shape));
        }
        if factor == 0 {
            return Err(arg_err!("upsample4d: factor must be >= 1"));
        }
        let mut v = a;
        for axis in 0..4 {
            v = self.resample(v, axis, shape[axis] * factor)?;
        }
        Ok(v)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute: {:?} is not a permutation of rank {}", perm, shape.len()));
        }
        let out = kernels::permute(self.value(a).data(), &shape, perm);
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::new(&new_shape, out)?;
        Ok(self.push_op(t, Op::Permute { a, perm: perm.to_vec() }, &[a], Vec::new()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape { a }, &[a], Vec::new()))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| arg_err!("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat: axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(dim_err!("concat: {:?} does not match {:?} off axis {axis}", s, base));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let n = self.shape(*v)[axis];
                out.extend_from_slice(&self.value(*v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_op(t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs, Vec::new()))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        self.push_op(Tensor::scalar(s), Op::Sum { a }, &[a], Vec::new())
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(dim_err!("mean_axis: bad axis {axis} for {:?}", shape));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let x = self.value(a).data();
        let inv: T = lit(1.0 / n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut new_shape = shape;
        new_shape.remove(axis);
        let t = Tensor::new(&new_shape, out)?;
        Ok(self.push_op(t, Op::MeanAxis { a, axis }, &[a], Vec::new()))
    }

    /// Scales every last-axis vector to unit length; zero vectors stay zero.
    pub fn normalize_l2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let f = shape.last().copied().unwrap_or(0);
        if f == 0 {
            return Err(dim_err!("normalize_l2: empty feature axis in {:?}", shape));
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for (xs, ys) in x.chunks_exact(f).zip(out.chunks_exact_mut(f)) {
            let norm = xs.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            if norm > T::zero() {
                for (y, &v) in ys.iter_mut().zip(xs) {
                    *y = v / norm;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_op(t, Op::NormalizeL2 { a }, &[a], Vec::new()))
    }

    /// Euclidean norm over the last axis; the gradient at a zero vector is
    /// taken to be zero.
    pub fn norm_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let f = shape.last().copied().unwrap_or(0);
        if f == 0 {
            return Err(dim_err!("norm_last: empty feature axis in {:?}", shape));
        }
        let out = self
            .value(a)
            .data()
            .chunks_exact(f)
            .map(|xs| xs.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt())
            .collect();
        let t = Tensor::new(&shape[..shape.len() - 1], out)?;
        Ok(self.push_op(t, Op::NormLast { a }, &[a], Vec::new()))
    }

    /// `x [.., in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Swaps the two trailing axes of a rank ≥ 2 tensor.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(dim_err!("transpose_last: rank {r} < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }
}
