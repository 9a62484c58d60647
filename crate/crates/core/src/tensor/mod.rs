//! Dense kernels, seeded randomness and the `TNSR` file format.

mod matrix;
mod rng;
pub mod tnsr;

pub use matrix::{dot, matmul, matmul_transa, matmul_transb, matvec, matvec_t, outer, DenseMatrix, DenseVector};
pub use rng::{gaussian, gaussian_fill, Rng};
pub use tnsr::{DType, Tensor};
