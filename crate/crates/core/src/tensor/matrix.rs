use std::fmt;

use crate::cost::ledger;
use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols)).finish()?;
        }
        Ok(())
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "buffer of length {} does not fit {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix { data, ..*self })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseMatrix {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(DenseMatrix { data, ..*self })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Copies `block` into `self` with its top-left corner at (`row`, `col`).
    pub fn set_block(&mut self, row: usize, col: usize, block: &Self) -> Result<()> {
        if row + block.rows > self.rows || col + block.cols > self.cols {
            return Err(Error::shape(format!(
                "block {}x{} at ({row},{col}) exceeds {}x{}",
                block.rows, block.cols, self.rows, self.cols
            )));
        }
        for i in 0..block.rows {
            self.row_mut(row + i)[col..col + block.cols].copy_from_slice(block.row(i));
        }
        Ok(())
    }

    pub fn block(&self, row: usize, col: usize, rows: usize, cols: usize) -> Result<Self> {
        if row + rows > self.rows || col + cols > self.cols || rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "block {rows}x{cols} at ({row},{col}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(Self::from_fn(rows, cols, |i, j| self[(row + i, col + j)]))
    }

    /// Stacks matrices of equal width vertically.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("vstack of nothing"))?;
        if parts.iter().any(|p| p.cols != first.cols) {
            return Err(Error::shape("vstack: column counts differ"));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Self::new(rows, first.cols, data)
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Dense column vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::shape("vector length must be positive"));
        }
        Ok(DenseVector(data))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector length must be positive");
        DenseVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_data(self) -> Vec<f64> {
        self.0
    }

    /// View as a 1 x len row matrix.
    pub fn as_row(&self) -> DenseMatrix {
        DenseMatrix {
            rows: 1,
            cols: self.0.len(),
            data: self.0.clone(),
        }
    }

    pub fn from_row(m: DenseMatrix) -> Result<Self> {
        if m.rows != 1 {
            return Err(Error::shape(format!("expected a single row, got {} rows", m.rows)));
        }
        Ok(DenseVector(m.data))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

/// `a * b`. Registers `a.rows * a.cols * b.cols` MACs.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (cij, bkj) in crow.iter_mut().zip(brow) {
                *cij += aik * bkj;
            }
        }
    }
    ledger::record((a.rows * a.cols * b.cols) as u64);
    Ok(c)
}

/// `a * b^T`. Registers `a.rows * a.cols * b.rows` MACs.
pub fn matmul_transb(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_transb: {}x{} times ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            c.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    ledger::record((a.rows * a.cols * b.rows) as u64);
    Ok(c)
}

/// `a^T * b`. Registers `a.cols * a.rows * b.cols` MACs.
pub fn matmul_transa(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_transa: ({}x{})^T times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = DenseMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
            for (cij, bkj) in crow.iter_mut().zip(brow) {
                *cij += aki * bkj;
            }
        }
    }
    ledger::record((a.rows * a.cols * b.cols) as u64);
    Ok(c)
}

/// `w * x`. Registers `rows * cols` MACs.
pub fn matvec(w: &DenseMatrix, x: &DenseVector) -> Result<DenseVector> {
    if w.cols != x.len() {
        return Err(Error::shape(format!(
            "matvec: {}x{} times vector of length {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    let data = (0..w.rows).map(|i| dot(w.row(i), x.data())).collect();
    ledger::record((w.rows * w.cols) as u64);
    Ok(DenseVector(data))
}

/// `w^T * x`. Registers `rows * cols` MACs.
pub fn matvec_t(w: &DenseMatrix, x: &DenseVector) -> Result<DenseVector> {
    if w.rows != x.len() {
        return Err(Error::shape(format!(
            "matvec_t: ({}x{})^T times vector of length {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    let mut out = vec![0.0; w.cols];
    for (i, &xi) in x.data().iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    ledger::record((w.rows * w.cols) as u64);
    Ok(DenseVector(out))
}

/// `u v^T`. Registers `len(u) * len(v)` MACs.
pub fn outer(u: &DenseVector, v: &DenseVector) -> DenseMatrix {
    let data = u
        .data()
        .iter()
        .flat_map(|&a| v.data().iter().map(move |&b| a * b))
        .collect();
    ledger::record((u.len() * v.len()) as u64);
    DenseMatrix {
        rows: u.len(),
        cols: v.len(),
        data,
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}
