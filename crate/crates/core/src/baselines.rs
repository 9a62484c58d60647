//! Coordination baselines: plain batching (per-teammate self-attention)
//! and joint attention over the concatenated tokens of the whole team.
//!
//! Both are forward-only with fixed random projections. No positional
//! encoding is applied, so joint attention sees the team's tokens as an
//! unordered set.

use crate::attention::attend;
use crate::error::{Error, Result};
use crate::tensor::{gaussian, matmul_transb, DenseMatrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub token_count: usize,
    pub model_dim: usize,
    pub head_count: usize,
}

impl AttentionSpec {
    pub fn new(token_count: usize, model_dim: usize, head_count: usize) -> Result<Self> {
        if token_count == 0 || model_dim == 0 || head_count == 0 {
            return Err(Error::param("attention dims must be positive"));
        }
        if !model_dim.is_multiple_of(head_count) {
            return Err(Error::param(format!(
                "model dim {model_dim} not divisible by {head_count} heads"
            )));
        }
        Ok(AttentionSpec {
            token_count,
            model_dim,
            head_count,
        })
    }
}

/// Fixed query/key/value projections shared by every teammate.
#[derive(Debug, Clone)]
pub struct AttentionBaseline {
    spec: AttentionSpec,
    wq: DenseMatrix,
    wk: DenseMatrix,
    wv: DenseMatrix,
}

impl AttentionBaseline {
    pub fn new(spec: AttentionSpec, rng: &mut Rng) -> Result<Self> {
        let d = spec.model_dim;
        let std = 1.0 / (d as f64).sqrt();
        Ok(AttentionBaseline {
            spec,
            wq: gaussian(d, d, rng, std)?,
            wk: gaussian(d, d, rng, std)?,
            wv: gaussian(d, d, rng, std)?,
        })
    }

    pub fn spec(&self) -> AttentionSpec {
        self.spec
    }

    pub fn value_projection(&self) -> &DenseMatrix {
        &self.wv
    }

    fn check(&self, tokens: &[DenseMatrix]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::shape("no teammates"));
        }
        let want = (self.spec.token_count, self.spec.model_dim);
        for (i, t) in tokens.iter().enumerate() {
            if t.shape() != want {
                return Err(Error::shape(format!(
                    "teammate {i}: tokens are {}x{}, expected {}x{}",
                    t.rows(),
                    t.cols(),
                    want.0,
                    want.1
                )));
            }
        }
        Ok(())
    }

    fn attend_block(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let q = matmul_transb(x, &self.wq)?;
        let k = matmul_transb(x, &self.wk)?;
        let v = matmul_transb(x, &self.wv)?;
        Ok(attend(&q, &k, &v, self.spec.head_count)?.0)
    }

    /// Batching: each teammate attends over its own tokens only.
    pub fn self_attention(&self, tokens: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        self.check(tokens)?;
        tokens.iter().map(|x| self.attend_block(x)).collect()
    }

    /// Joint attention: one attention over all `T * token_count` tokens,
    /// split back per teammate.
    pub fn joint_attention(&self, tokens: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        self.check(tokens)?;
        let all = DenseMatrix::vstack(&tokens.iter().collect::<Vec<_>>())?;
        let out = self.attend_block(&all)?;
        let n = self.spec.token_count;
        (0..tokens.len())
            .map(|t| out.block(t * n, 0, n, self.spec.model_dim))
            .collect()
    }
}
