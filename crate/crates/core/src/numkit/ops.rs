//! Dense kernels. Every product reports its exact MAC count to the ledger.

use super::ledger;
use super::mat::Mat;
use crate::error::{Error, Result};

/// `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, n, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * p];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = ad[i * n + k];
            let brow = &bd[k * p..(k + 1) * p];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    ledger::add_macs((m * n * p) as u64);
    finite(Mat::new(m, p, out)?, "matmul")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (m, n, p) = (a.rows(), a.cols(), b.rows());
    let mut out = Vec::with_capacity(m * p);
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..p {
            let brow = b.row_slice(j);
            out.push(arow.iter().zip(brow).fold(0.0, |acc, (x, y)| acc + x * y));
        }
    }
    ledger::add_macs((m * n * p) as u64);
    finite(Mat::new(m, p, out)?, "matmul_nt")
}

/// `aᵀ · b` without materializing the transpose. Accumulates over rows of
/// `a`/`b` in ascending order.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * p];
    for k in 0..n {
        let arow = a.row_slice(k);
        let brow = b.row_slice(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    ledger::add_macs((m * n * p) as u64);
    finite(Mat::new(m, p, out)?, "matmul_tn")
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Mat) -> Result<Mat> {
    a.ensure_finite("softmax_rows")?;
    let mut out = a.clone();
    let cols = a.cols();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Elementwise `elu(x) + 1`, the positive feature map of kernelized attention.
/// The negative branch is evaluated as `exp(x)` so it stays strictly positive.
pub fn phi_map(a: &Mat) -> Mat {
    a.map(phi)
}

#[inline]
pub fn phi(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

pub fn relu(a: &Mat) -> Mat {
    a.map(|x| x.max(0.0))
}

pub fn clamp_mat(a: &Mat, bound: f64) -> Result<Mat> {
    if bound.is_nan() || bound <= 0.0 {
        return Err(Error::Param(format!(
            "clamp bound must be positive, got {bound}"
        )));
    }
    Ok(a.map(|x| x.clamp(-bound, bound)))
}

pub fn frob_norm(a: &Mat) -> f64 {
    a.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn finite(m: Mat, op: &'static str) -> Result<Mat> {
    m.ensure_finite(op)?;
    Ok(m)
}
