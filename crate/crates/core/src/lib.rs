//! Coordinated low-rank adaptation for teams of model instances.
//!
//! [`adapter`] holds the adapted linear layer; [`baselines`] the batching
//! and joint-attention contrasts; [`diffusion`] a small flow-matching
//! denoiser built from adapted layers; [`synth`] the synthetic
//! decomposition and inpainting tasks; [`cost`] MAC accounting and the
//! closed-form cost model.

pub mod adapter;
pub mod attention;
pub mod baselines;
pub mod cost;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod synth;
pub mod tensor;

pub use adapter::{ActivationMask, AdapterMode, Checkpoint, TeamConfig, TeamGrads, TeamworkAdapter};
pub use cost::ledger::{FlopLedger, MacCounts, MacKind};
pub use error::{Error, Result};
pub use tensor::{DenseMatrix, DenseVector, Rng};
