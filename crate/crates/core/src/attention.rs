//! Multi-head scaled dot-product attention over one token matrix.
//!
//! Token-mixing products are charged to [`MacKind::Attention`]: `N^2 d`
//! for the scores, `N^2 d` for the weighted values and `heads * N^2` for
//! the softmax normalization. Projections are the caller's business.

use crate::cost::ledger::{self, MacKind};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_transa, matmul_transb, DenseMatrix};

/// Saved softmax weights, one `N x N` matrix per head.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub probs: Vec<DenseMatrix>,
}

fn head_cols(m: &DenseMatrix, head: usize, width: usize) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), width, |i, j| m[(i, head * width + j)])
}

fn put_head_cols(dst: &mut DenseMatrix, src: &DenseMatrix, head: usize) {
    let width = src.cols();
    for i in 0..src.rows() {
        dst.row_mut(i)[head * width..(head + 1) * width].copy_from_slice(src.row(i));
    }
}

/// Row-wise softmax with max subtraction. Charges one MAC per entry for
/// the normalization.
pub fn softmax_rows(m: &mut DenseMatrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    ledger::record_as(MacKind::Attention, (m.rows() * m.cols()) as u64);
}

fn check(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix, heads: usize) -> Result<usize> {
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::param(format!("model dim {} not divisible by {heads} heads", q.cols())));
    }
    if k.shape() != v.shape() || q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "attention operands q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    Ok(q.cols() / heads)
}

/// `softmax(Q K^T / sqrt(d_head)) V` per head, heads concatenated.
pub fn attend(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix, heads: usize) -> Result<(DenseMatrix, AttentionCache)> {
    let dh = check(q, k, v, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = DenseMatrix::zeros(q.rows(), v.cols());
    let mut probs = Vec::with_capacity(heads);
    ledger::with_kind(MacKind::Attention, || -> Result<()> {
        for h in 0..heads {
            let (qh, kh, vh) = (head_cols(q, h, dh), head_cols(k, h, dh), head_cols(v, h, dh));
            let mut p = matmul_transb(&qh, &kh)?;
            p.scale(scale);
            softmax_rows(&mut p);
            put_head_cols(&mut out, &matmul(&p, &vh)?, h);
            probs.push(p);
        }
        Ok(())
    })?;
    Ok((out, AttentionCache { probs }))
}

/// Gradients of [`attend`] with respect to `q`, `k` and `v`.
pub fn attend_backward(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    cache: &AttentionCache,
    grad_out: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let heads = cache.probs.len();
    let dh = check(q, k, v, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = DenseMatrix::zeros(q.rows(), q.cols());
    let mut dk = DenseMatrix::zeros(k.rows(), k.cols());
    let mut dv = DenseMatrix::zeros(v.rows(), v.cols());
    ledger::with_kind(MacKind::Attention, || -> Result<()> {
        for (h, p) in cache.probs.iter().enumerate() {
            let (qh, kh, vh) = (head_cols(q, h, dh), head_cols(k, h, dh), head_cols(v, h, dh));
            let go = head_cols(grad_out, h, dh);
            put_head_cols(&mut dv, &matmul_transa(p, &go)?, h);
            let dp = matmul_transb(&go, &vh)?;
            let mut ds = DenseMatrix::zeros(p.rows(), p.cols());
            for i in 0..p.rows() {
                let (prow, dprow) = (p.row(i), dp.row(i));
                let inner: f64 = prow.iter().zip(dprow).map(|(a, b)| a * b).sum();
                for (d, (pv, dpv)) in ds.row_mut(i).iter_mut().zip(prow.iter().zip(dprow)) {
                    *d = pv * (dpv - inner) * scale;
                }
            }
            put_head_cols(&mut dq, &matmul(&ds, &kh)?, h);
            put_head_cols(&mut dk, &matmul_transa(&ds, &qh)?, h);
        }
        Ok(())
    })?;
    Ok((dq, dk, dv))
}
