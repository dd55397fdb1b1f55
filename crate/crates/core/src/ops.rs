//! Layer primitives with hand-derived backward passes.
//!
//! Every forward returns what its backward needs; backward functions return
//! input gradients and never touch parameter storage. Callers accumulate.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Negative-control hook for the self-test: when set, the GELU backward is
/// deliberately wrong so the gradient suite must fail.
#[doc(hidden)]
pub static CORRUPT_GELU_BACKWARD: AtomicBool = AtomicBool::new(false);

// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// c[m×n] += a[k×m]ᵀ · b[k×n]
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.ensure_matrix("matmul")?;
    let (k2, n) = b.ensure_matrix("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), c.data_mut());
    Ok(c)
}

/// Returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(dc.shape(), &[m, n]);
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[k, n]);
    gemm_nt(m, n, k, dc.data(), b.data(), da.data_mut());
    gemm_tn(k, m, n, a.data(), dc.data(), db.data_mut());
    (da, db)
}

/// Input half of [`matmul_backward`]: `dC·Bᵀ`.
pub fn matmul_backward_input(b: &Tensor, dc: &Tensor) -> Tensor {
    let (k, n) = (b.rows(), b.cols());
    let m = dc.rows();
    let mut da = Tensor::zeros(&[m, k]);
    gemm_nt(m, n, k, dc.data(), b.data(), da.data_mut());
    da
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.ensure_matrix("matmul_nt")?;
    let (n, k2) = b.ensure_matrix("matmul_nt")?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm_nt(m, k, n, a.data(), b.data(), c.data_mut());
    Ok(c)
}

/// Backward of `c = a · bᵀ`: `(dc·b, dcᵀ·a)`.
pub fn matmul_nt_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[n, k]);
    gemm_nn(m, n, k, dc.data(), b.data(), da.data_mut());
    gemm_tn(n, m, k, dc.data(), a.data(), db.data_mut());
    (da, db)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.clear_grad();
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    y
}

/// Given `y = softmax_rows(x)` and `dy`, returns `dx = y ⊙ (dy − ⟨dy, y⟩)`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let (yr, dyr) = (y.row(i), dy.row(i));
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &dv) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dv - dot);
        }
    }
    dx
}

/// Forward state of a layer norm.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Normalized input before the affine transform.
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (n, d) = x.ensure_matrix("layer_norm")?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let mut normalized = Tensor::zeros(&[n, d]);
    let mut y = Tensor::zeros(&[n, d]);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        let xh = normalized.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        let xh = normalized.row(i).to_vec();
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        y,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (cache.normalized.rows(), cache.normalized.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let g = gamma.data();
    let mut dxh = vec![0.0; d];
    for i in 0..n {
        let xh = cache.normalized.row(i);
        let dyr = dy.row(i);
        for j in 0..d {
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
            dxh[j] = dyr[j] * g[j];
        }
        let sum_dxh: f64 = dxh.iter().sum();
        let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let scale = cache.inv_std[i] / d as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = scale * (d as f64 * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/√(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let corrupt = if CORRUPT_GELU_BACKWARD.load(Ordering::Relaxed) {
        1.5
    } else {
        1.0
    };
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v) * corrupt)
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `x · W + bias` with the bias broadcast over rows.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, a) = x.ensure_matrix("linear")?;
    let (a2, b) = weight.ensure_matrix("linear")?;
    if a != a2 {
        return Err(Error::dim("linear", x.shape(), weight.shape()));
    }
    if bias.len() != b {
        return Err(Error::dim("linear", weight.shape(), bias.shape()));
    }
    let mut y = Tensor::zeros(&[x.rows(), b]);
    for i in 0..x.rows() {
        y.row_mut(i).copy_from_slice(bias.data());
    }
    gemm_nn(x.rows(), a, b, x.data(), weight.data(), y.data_mut());
    Ok(y)
}

/// Returns `(dx, dW, dbias)`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (dx, dw) = matmul_backward(x, weight, dy);
    let mut db = Tensor::zeros(&[weight.cols()]);
    for i in 0..dy.rows() {
        for (o, v) in db.data_mut().iter_mut().zip(dy.row(i)) {
            *o += v;
        }
    }
    (dx, dw, db)
}

/// Mean negative log-likelihood of the true class and its gradient
/// `(softmax − onehot) / B`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = logits.ensure_matrix("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::Data(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside [0, {k})")));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad.row_mut(i)[label] -= 1.0;
    }
    for v in grad.data_mut() {
        *v /= b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Index of the largest entry; first index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
