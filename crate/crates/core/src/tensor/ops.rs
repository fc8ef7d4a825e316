//! Forward kernels and backward rules for every graph operation.

use super::{accumulate, Graph, Node, Op, Tensor, Var};
use crate::error::{Error, Result};

/// Default epsilon floor for row normalization.
pub const L2_NORM_EPS: f64 = 1e-12;

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl Graph {
    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value, self.any_requires_grad(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), value, self.any_requires_grad(&[a, b])))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value, self.any_requires_grad(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        let rg = self.requires_grad(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    /// `x + b` where `x` is `(rows, cols)` and `b` is `(cols,)`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(shape_err("add_row_bias", tx, tb));
        }
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += tb.data()[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(
            Op::AddRowBias(x, bias),
            value,
            self.any_requires_grad(&[x, bias]),
        ))
    }

    /// `x + b` where `x` is `(n, c, h, w)` and `b` is `(c,)`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 4 || tb.shape() != [tx.shape()[1]] {
            return Err(shape_err("add_channel_bias", tx, tb));
        }
        let shape = tx.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let b = tb.data()[ch];
                let base = (i * c + ch) * plane;
                for p in &mut data[base..base + plane] {
                    *p += b;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::AddChannelBias(x, bias),
            value,
            self.any_requires_grad(&[x, bias]),
        ))
    }

    /// 2-D matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::Matmul(a, b), value, self.any_requires_grad(&[a, b])))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: ta.shape().to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let value = Tensor::new(vec![cols, rows], transpose_kernel(ta.data(), rows, cols))?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    /// 2-D convolution, NCHW input, OIHW kernel, symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tk) = (self.value(input), self.value(kernel));
        if tx.shape().len() != 4 || tk.shape().len() != 4 || tx.shape()[1] != tk.shape()[1] {
            return Err(shape_err("conv2d", tx, tk));
        }
        if stride == 0 {
            return Err(Error::Domain {
                op: "conv2d",
                reason: "stride must be >= 1".into(),
            });
        }
        let geom = ConvGeom::new(tx.shape(), tk.shape(), stride, padding)?;
        let value = conv2d_forward(tx, tk, &geom)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            value,
            self.any_requires_grad(&[input, kernel]),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Relu(a), value, rg))
    }

    /// `(n, c, h, w) -> (n, c)` mean over the spatial plane.
    pub fn global_average_pool(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 4 {
            return Err(Error::InvalidShape {
                op: "global_average_pool",
                shape: ta.shape().to_vec(),
                reason: "expected (n, c, h, w)".into(),
            });
        }
        let (n, c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], ta.shape()[3]);
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            let base = i * plane;
            out[i] = ta.data()[base..base + plane].iter().sum::<f64>() / plane as f64;
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::GlobalAvgPool(a), value, rg))
    }

    /// `x @ w + b` with `x (batch, in)`, `w (in, out)`, `b (out,)`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_row_bias(h, bias)
    }

    /// Rows rescaled to unit L2 norm with the default epsilon floor.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.l2_normalize_rows_eps(a, L2_NORM_EPS)
    }

    /// Rows rescaled by `1 / max(norm, eps)`. With `eps <= 0` a zero-norm
    /// row is a domain error instead of a silent division by zero.
    pub fn l2_normalize_rows_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "l2_normalize_rows",
                shape: ta.shape().to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let norm = l2_norm(row);
            if norm <= 0.0 && eps <= 0.0 {
                return Err(Error::Domain {
                    op: "l2_normalize_rows",
                    reason: format!("row {r} has zero norm and no epsilon guard"),
                });
            }
            let denom = norm.max(eps);
            for v in row {
                *v /= denom;
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::L2NormalizeRows(a, eps), value, rg))
    }

    /// Per-row `log(sum(exp(x)))`, max-shifted: `(rows, cols) -> (rows,)`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "log_sum_exp_rows",
                shape: ta.shape().to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = log_sum_exp(&ta.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![rows], out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::LogSumExpRows(a), value, rg))
    }

    /// Mean of all entries, as a scalar node.
    pub fn scalar_mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(Error::InvalidShape {
                op: "scalar_mean",
                shape: ta.shape().to_vec(),
                reason: "cannot reduce an empty tensor".into(),
            });
        }
        let mean = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::ScalarMean(a), Tensor::scalar(mean), rg))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let sum = self.value(a).data().iter().sum::<f64>();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::SumAll(a), Tensor::scalar(sum), rg))
    }
}

/// Distribute `grad_out` of node `i` into the gradients of its inputs.
pub(crate) fn accumulate_backward(
    nodes: &[Node],
    i: usize,
    grad_out: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |v: Var| &nodes[v.index()].value;
    let rg = |v: Var| nodes[v.index()].requires_grad;
    let g = grad_out.data();

    match &nodes[i].op {
        Op::Leaf => {}

        Op::Add(a, b) => {
            for v in [a, b] {
                if rg(*v) {
                    accumulate(&mut grads[v.index()], val(*v).shape(), |d| {
                        axpy(d, g, 1.0)
                    });
                }
            }
        }

        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| axpy(d, g, 1.0));
            }
            if rg(*b) {
                accumulate(&mut grads[b.index()], val(*b).shape(), |d| axpy(d, g, -1.0));
            }
        }

        Op::Mul(a, b) => {
            if rg(*a) {
                let vb = val(*b).data();
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
            }
            if rg(*b) {
                let va = val(*a).data();
                accumulate(&mut grads[b.index()], val(*b).shape(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
        }

        Op::Scale(a, factor) => {
            if rg(*a) {
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| {
                    axpy(d, g, *factor)
                });
            }
        }

        Op::AddRowBias(x, bias) => {
            if rg(*x) {
                accumulate(&mut grads[x.index()], val(*x).shape(), |d| axpy(d, g, 1.0));
            }
            if rg(*bias) {
                let cols = val(*bias).len();
                let rows = val(*x).shape()[0];
                accumulate(&mut grads[bias.index()], val(*bias).shape(), |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c];
                        }
                    }
                });
            }
        }

        Op::AddChannelBias(x, bias) => {
            if rg(*x) {
                accumulate(&mut grads[x.index()], val(*x).shape(), |d| axpy(d, g, 1.0));
            }
            if rg(*bias) {
                let shape = val(*x).shape();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                accumulate(&mut grads[bias.index()], val(*bias).shape(), |d| {
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            d[ch] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                });
            }
        }

        Op::Matmul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if rg(*a) {
                // dA = G @ B^T
                let da = matmul_nt_kernel(g, val(*b).data(), m, n, k);
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| axpy(d, &da, 1.0));
            }
            if rg(*b) {
                // dB = A^T @ G
                let db = matmul_tn_kernel(val(*a).data(), g, m, k, n);
                accumulate(&mut grads[b.index()], val(*b).shape(), |d| axpy(d, &db, 1.0));
            }
        }

        Op::Transpose(a) => {
            if rg(*a) {
                let (rows, cols) = (val(*a).shape()[0], val(*a).shape()[1]);
                // grad_out has shape (cols, rows)
                let gt = transpose_kernel(g, cols, rows);
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| axpy(d, &gt, 1.0));
            }
        }

        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let geom = ConvGeom::new(val(*input).shape(), val(*kernel).shape(), *stride, *padding)?;
            let mut gi = rg(*input).then(|| Tensor::zeros(val(*input).shape().to_vec()));
            let mut gk = rg(*kernel).then(|| Tensor::zeros(val(*kernel).shape().to_vec()));
            conv2d_backward(
                val(*input),
                val(*kernel),
                grad_out,
                &geom,
                gi.as_mut(),
                gk.as_mut(),
            );
            if let Some(gi) = gi {
                accumulate(&mut grads[input.index()], val(*input).shape(), |d| {
                    axpy(d, gi.data(), 1.0)
                });
            }
            if let Some(gk) = gk {
                accumulate(&mut grads[kernel.index()], val(*kernel).shape(), |d| {
                    axpy(d, gk.data(), 1.0)
                });
            }
        }

        Op::Relu(a) => {
            if rg(*a) {
                let va = val(*a).data();
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| {
                    for k in 0..d.len() {
                        if va[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
        }

        Op::GlobalAvgPool(a) => {
            if rg(*a) {
                let shape = val(*a).shape();
                let plane = shape[2] * shape[3];
                let inv = 1.0 / plane as f64;
                accumulate(&mut grads[a.index()], shape, |d| {
                    for (i, gi) in g.iter().enumerate() {
                        let base = i * plane;
                        let contrib = gi * inv;
                        for v in &mut d[base..base + plane] {
                            *v += contrib;
                        }
                    }
                });
            }
        }

        Op::L2NormalizeRows(a, eps) => {
            if rg(*a) {
                let (rows, cols) = (val(*a).shape()[0], val(*a).shape()[1]);
                let x = val(*a).data();
                let y = nodes[i].value.data();
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| {
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let norm = l2_norm(&x[s.clone()]);
                        if norm > *eps {
                            // y = x / ||x||: dx = (g - (g . y) y) / ||x||
                            let dot: f64 = g[s.clone()]
                                .iter()
                                .zip(&y[s.clone()])
                                .map(|(gi, yi)| gi * yi)
                                .sum();
                            for c in 0..cols {
                                d[r * cols + c] += (g[r * cols + c] - dot * y[r * cols + c]) / norm;
                            }
                        } else {
                            // clamped branch is linear: y = x / eps
                            for c in 0..cols {
                                d[r * cols + c] += g[r * cols + c] / eps;
                            }
                        }
                    }
                });
            }
        }

        Op::LogSumExpRows(a) => {
            if rg(*a) {
                let (rows, cols) = (val(*a).shape()[0], val(*a).shape()[1]);
                let x = val(*a).data();
                let y = nodes[i].value.data();
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            // softmax entry; underflows to exactly 0 for masked inputs
                            d[r * cols + c] += g[r] * (x[r * cols + c] - y[r]).exp();
                        }
                    }
                });
            }
        }

        Op::ScalarMean(a) => {
            if rg(*a) {
                let inv = 1.0 / val(*a).len() as f64;
                let g0 = g[0];
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| {
                    for v in d {
                        *v += g0 * inv;
                    }
                });
            }
        }

        Op::SumAll(a) => {
            if rg(*a) {
                let g0 = g[0];
                accumulate(&mut grads[a.index()], val(*a).shape(), |d| {
                    for v in d {
                        *v += g0;
                    }
                });
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// kernels

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect()
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `c = a @ b`, a: (m,k), b: (k,n). ikj loop order for cache locality.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                c_row[j] += a_il * b_row[j];
            }
        }
    }
    c
}

/// `c = a @ b^T`, a: (m,k), b: (n,k) -> (m,n).
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c = a^T @ b`, a: (k,m), b: (k,n) -> (m,n).
fn matmul_tn_kernel(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for l in 0..k {
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let a_li = a[l * m + i];
            if a_li == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += a_li * b_row[j];
            }
        }
    }
    c
}

fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) struct ConvGeom {
    n: usize,
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (n, ic, h, w) = (input[0], input[1], input[2], input[3]);
        let (oc, kic, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kic != ic || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: input.to_vec(),
                reason: format!("incompatible with kernel {kernel:?}, stride {stride}, padding {padding}"),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            ic,
            h,
            w,
            oc,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.ic * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image (ic,h,w) into (ic*kh*kw, oh*ow); out-of-bounds taps are zero.
fn im2col(img: &[f64], geom: &ConvGeom, cols: &mut [f64]) {
    let ConvGeom {
        ic,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
        ..
    } = *geom;
    cols.fill(0.0);
    let ncols = oh * ow;
    for c in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ncols;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * ow + ox] = img[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Fold gradient columns back into an image gradient (scatter-add of im2col).
fn col2im(cols: &[f64], geom: &ConvGeom, img_grad: &mut [f64]) {
    let ConvGeom {
        ic,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
        ..
    } = *geom;
    let ncols = oh * ow;
    for c in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ncols;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img_grad[(c * h + iy as usize) * w + ix as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let img_len = geom.ic * geom.h * geom.w;
    let out_plane = geom.col_cols();
    let mut out = vec![0.0; geom.n * geom.oc * out_plane];
    let mut cols = vec![0.0; geom.col_rows() * out_plane];
    for img in 0..geom.n {
        im2col(&input.data()[img * img_len..(img + 1) * img_len], geom, &mut cols);
        let o = matmul_kernel(kernel.data(), &cols, geom.oc, geom.col_rows(), out_plane);
        out[img * geom.oc * out_plane..(img + 1) * geom.oc * out_plane].copy_from_slice(&o);
    }
    Tensor::new(vec![geom.n, geom.oc, geom.oh, geom.ow], out)
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    geom: &ConvGeom,
    mut grad_input: Option<&mut Tensor>,
    mut grad_kernel: Option<&mut Tensor>,
) {
    let img_len = geom.ic * geom.h * geom.w;
    let out_plane = geom.col_cols();
    let col_rows = geom.col_rows();
    let mut cols = vec![0.0; col_rows * out_plane];
    for img in 0..geom.n {
        let g = &grad_out.data()[img * geom.oc * out_plane..(img + 1) * geom.oc * out_plane];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            // dW += G @ cols^T (cols recomputed from the saved input)
            im2col(&input.data()[img * img_len..(img + 1) * img_len], geom, &mut cols);
            let dw = matmul_nt_kernel(g, &cols, geom.oc, out_plane, col_rows);
            axpy(gk.data_mut(), &dw, 1.0);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // dCols = W^T @ G, folded back into the input plane
            let dcols = matmul_tn_kernel(kernel.data(), g, geom.oc, col_rows, out_plane);
            col2im(
                &dcols,
                geom,
                &mut gi.data_mut()[img * img_len..(img + 1) * img_len],
            );
        }
    }
}
