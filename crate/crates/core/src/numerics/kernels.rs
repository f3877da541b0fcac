//! Forward kernels and their adjoints. The tape calls into these; they are
//! also exposed directly for callers that do not need gradients.

use crate::error::{dim_err, Error, Result};

use super::Tensor;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    /// Row-major view, transposed when `trans` is set.
    pub fn maybe_t(data: &'a [f64], rows: usize, cols: usize, trans: bool) -> Self {
        let m = Self::row_major(data, rows, cols);
        if trans {
            m.t()
        } else {
            m
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were built from slices covering every strided index
    // and `c` holds m*n contiguous values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// `op(a) * op(b)` where `op` optionally transposes a rank-2 tensor.
pub fn matmul_t(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return dim_err(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let am = MatRef::maybe_t(a.data(), a.shape()[0], a.shape()[1], ta);
    let bm = MatRef::maybe_t(b.data(), b.shape()[0], b.shape()[1], tb);
    if am.cols != bm.rows {
        return dim_err(format!(
            "matmul inner extents differ: {:?}{} x {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        ));
    }
    let mut out = vec![0.0; am.rows * bm.cols];
    gemm(1.0, am, bm, 0.0, &mut out);
    Tensor::new([am.rows, bm.cols], out)
}

/// Row-wise softmax over the last axis, max-subtracted.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("softmax input")?;
    let mut out = x.clone();
    let d = x.last_dim();
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Cached statistics of a layer-norm forward pass.
pub(crate) struct NormStats {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return dim_err(format!(
            "layer_norm affine length {}/{} does not match feature dim {d}",
            gamma.len(),
            beta.len()
        ));
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = if rs.is_finite() { (row[i] - mean) * rs } else { 0.0 };
            xhat[r * d + i] = xh;
            out[r * d + i] = xh * g[i] + b[i];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormStats { xhat, rstd }))
}

/// Layer normalization over the last axis: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Adjoints of layer norm given upstream `dy`. Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    stats: &NormStats,
    gamma: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = stats.rstd.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    for r in 0..rows {
        let off = r * d;
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for i in 0..d {
            let g = dy[off + i];
            let xh = stats.xhat[off + i];
            dg[i] += g * xh;
            db[i] += g;
            let dxh = g * gamma[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
        }
        let rs = stats.rstd[r];
        let inv_d = 1.0 / d as f64;
        for i in 0..d {
            let dxh = dy[off + i] * gamma[i];
            let xh = stats.xhat[off + i];
            dx[off + i] = rs * (dxh - inv_d * sum_dxh - xh * inv_d * sum_dxh_xh);
        }
    }
    (dx, dg, db)
}

/// Per-row standardization `(x - mean) / (std + eps)` with population std.
pub fn standardize(x: &Tensor, eps: f64) -> Tensor {
    standardize_forward(x, eps).0
}

pub(crate) struct StandardizeStats {
    pub centered: Vec<f64>,
    pub std: Vec<f64>,
}

pub(crate) fn standardize_forward(x: &Tensor, eps: f64) -> (Tensor, StandardizeStats) {
    let d = x.last_dim();
    let rows = x.rows();
    let mut centered = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut std = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let mut ss = 0.0;
        for i in 0..d {
            let c = row[i] - mean;
            centered[r * d + i] = c;
            ss += c * c;
        }
        let s = (ss / d as f64).sqrt();
        std[r] = s;
        let denom = s + eps;
        for i in 0..d {
            out[r * d + i] = centered[r * d + i] / denom;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), out).expect("same shape"),
        StandardizeStats { centered, std },
    )
}

pub(crate) fn standardize_backward(dy: &[f64], stats: &StandardizeStats, eps: f64, d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let inv_d = 1.0 / d as f64;
    for (r, &s) in stats.std.iter().enumerate() {
        let off = r * d;
        let denom = s + eps;
        let dyr = &dy[off..off + d];
        let c = &stats.centered[off..off + d];
        let mean_dy = dyr.iter().sum::<f64>() * inv_d;
        let dot: f64 = dyr.iter().zip(c).map(|(a, b)| a * b).sum();
        // d std / d x_i = c_i / (d * std); undefined for a constant row.
        let k = if s > 0.0 { dot / (denom * denom) * inv_d / s } else { 0.0 };
        for i in 0..d {
            dx[off + i] = (dyr[i] - mean_dy) / denom - k * c[i];
        }
    }
    dx
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Mean cross-entropy of `logits [B, C]` against integer labels, plus the
/// row softmax used for the adjoint.
pub(crate) fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let c = logits.last_dim();
    let b = logits.rows();
    if labels.len() != b {
        return dim_err(format!("{} labels for {b} logit rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} outside 0..{c}")));
    }
    let mut probs = logits.data().to_vec();
    let mut loss = 0.0;
    for (r, row) in probs.chunks_mut(c).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[r]];
        softmax_in_place(row);
    }
    Ok((loss / b as f64, probs))
}

/// Mean cross-entropy loss over a batch of logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_forward(logits, labels).map(|(l, _)| l)
}
