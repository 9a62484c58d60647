#![allow(dead_code)]

use teamwork::adapter::{ActivationMask, AdapterMode, TeamworkAdapter};
use teamwork::tensor::gaussian;
use teamwork::{DenseMatrix, Rng};

pub fn random_adapter(rng: &mut Rng, mode: AdapterMode, t: usize, m: usize, n: usize, r: usize) -> TeamworkAdapter {
    let w = gaussian(m, n, rng, 1.0).unwrap();
    let a = (0..t).map(|_| gaussian(m, r, rng, 1.0).unwrap()).collect();
    let b = (0..t).map(|_| gaussian(r, n, rng, 1.0).unwrap()).collect();
    TeamworkAdapter::new(w, a, b, mode).unwrap()
}

pub fn random_mask(rng: &mut Rng, t: usize) -> ActivationMask {
    loop {
        let bits: Vec<bool> = (0..t).map(|_| rng.bernoulli(0.6)).collect();
        if let Ok(m) = ActivationMask::new(bits) {
            return m;
        }
    }
}

/// Non-empty mask with at least one teammate off; needs `t >= 2`.
pub fn random_strict_subset(rng: &mut Rng, t: usize) -> ActivationMask {
    loop {
        let m = random_mask(rng, t);
        if !m.is_full() {
            return m;
        }
    }
}

pub fn blocks(rng: &mut Rng, count: usize, rows: usize, cols: usize) -> Vec<DenseMatrix> {
    (0..count).map(|_| gaussian(rows, cols, rng, 1.0).unwrap()).collect()
}

/// Plain LoRA on one vector: `W x + A (B x)`, accumulating each dot product
/// left to right from zero.
pub fn reference_lora(w: &DenseMatrix, a: &DenseMatrix, b: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    let dot = |row: &[f64], v: &[f64]| row.iter().zip(v).fold(0.0, |acc, (p, q)| acc + p * q);
    let frozen: Vec<f64> = (0..w.rows()).map(|i| dot(w.row(i), x)).collect();
    let code: Vec<f64> = (0..b.rows()).map(|i| dot(b.row(i), x)).collect();
    (0..a.rows()).map(|i| frozen[i] + dot(a.row(i), &code)).collect()
}

/// `sum_i <g_i, y_i>`, the scalar whose gradient a backward pass with
/// upstream `g` computes.
pub fn pairing(ys: &[DenseMatrix], gs: &[DenseMatrix]) -> f64 {
    ys.iter()
        .zip(gs)
        .map(|(y, g)| y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

pub const FD_STEP: f64 = 1e-5;
/// Gradients below this fraction of the objective's magnitude are compared
/// absolutely; differencing cannot resolve them.
pub const FD_FLOOR: f64 = 1e-6;

/// Relative error, with the denominator floored at `FD_FLOOR * max(1, |objective|)`.
pub fn relative_error(analytic: f64, numeric: f64, objective: f64) -> f64 {
    let floor = FD_FLOOR * objective.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference, where `f(delta)` evaluates the objective with one
/// parameter shifted by `delta`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}
