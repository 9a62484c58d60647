use crate::adapter::{ActivationMask, AdapterMode, TeamworkAdapter};
use crate::cost::ledger::{self, MacKind};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_transa, matmul_transb, DenseMatrix, DenseVector};

/// Gradients of one adapted layer, listed for the active teammates only.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamGrads {
    /// Active teammate indices, increasing. All other vectors align with it.
    pub teammates: Vec<usize>,
    /// `dL/dA_i` (m x r). Empty in `FrozenOnly` mode.
    pub grad_a: Vec<DenseMatrix>,
    /// `dL/dB_i` (r x n). Empty in `FrozenOnly` mode.
    pub grad_b: Vec<DenseMatrix>,
    /// `dL/dx_i`, shaped like the inputs.
    pub grad_x: Vec<DenseMatrix>,
}

impl TeamGrads {
    fn position(&self, teammate: usize) -> Option<usize> {
        self.teammates.iter().position(|&t| t == teammate)
    }

    pub fn grad_a_for(&self, teammate: usize) -> Option<&DenseMatrix> {
        self.position(teammate).and_then(|p| self.grad_a.get(p))
    }

    pub fn grad_b_for(&self, teammate: usize) -> Option<&DenseMatrix> {
        self.position(teammate).and_then(|p| self.grad_b.get(p))
    }
}

impl TeamworkAdapter {
    fn check_inputs(&self, xs: &[DenseMatrix], active: &[usize], width: usize, what: &str) -> Result<()> {
        if xs.len() != active.len() {
            return Err(Error::shape(format!(
                "{} {what} blocks for {} active teammates",
                xs.len(),
                active.len()
            )));
        }
        let tokens = xs[0].rows();
        for (x, &i) in xs.iter().zip(active) {
            if x.cols() != width || x.rows() != tokens {
                return Err(Error::shape(format!(
                    "teammate {i}: {what} block is {}x{}, expected {tokens}x{width}",
                    x.rows(),
                    x.cols()
                )));
            }
        }
        Ok(())
    }

    fn require_mode(&self, mode: AdapterMode, op: &str) -> Result<()> {
        if self.mode != mode {
            return Err(Error::param(format!("{op} needs {mode:?} mode, adapter is {:?}", self.mode)));
        }
        Ok(())
    }

    /// Applies the layer to token blocks, one `tokens x n` block per active
    /// teammate (rows are tokens). Dispatches on the adapter mode. Teammates
    /// are coupled token-by-token: row `k` of every block shares one code.
    pub fn forward(&self, xs: &[DenseMatrix], mask: &ActivationMask) -> Result<Vec<DenseMatrix>> {
        let active = self.check_mask(mask)?;
        self.check_inputs(xs, &active, self.in_dim(), "input")?;
        let mut ys = xs
            .iter()
            .map(|x| matmul_transb(x, &self.weight))
            .collect::<Result<Vec<_>>>()?;
        match self.mode {
            AdapterMode::FrozenOnly => {}
            AdapterMode::Teamwork => {
                let code = self.shared_code(xs, &active)?;
                ledger::with_kind(MacKind::LowRank, || -> Result<()> {
                    for (y, &i) in ys.iter_mut().zip(&active) {
                        let offset = matmul_transb(&code, &self.factors_a[i])?;
                        self.add_offset(y, &offset)?;
                    }
                    Ok(())
                })?;
            }
            AdapterMode::PerInstanceLora => {
                ledger::with_kind(MacKind::LowRank, || -> Result<()> {
                    for ((y, x), &i) in ys.iter_mut().zip(xs).zip(&active) {
                        let code = matmul_transb(x, &self.factors_b[i])?;
                        let offset = matmul_transb(&code, &self.factors_a[i])?;
                        self.add_offset(y, &offset)?;
                    }
                    Ok(())
                })?;
            }
        }
        Ok(ys)
    }

    fn add_offset(&self, y: &mut DenseMatrix, offset: &DenseMatrix) -> Result<()> {
        if self.scale == 1.0 {
            y.add_assign(offset)
        } else {
            y.axpy(self.scale, offset)
        }
    }

    /// `S = sum_j X_j B_j^T` over active teammates (tokens x r).
    fn shared_code(&self, xs: &[DenseMatrix], active: &[usize]) -> Result<DenseMatrix> {
        ledger::with_kind(MacKind::LowRank, || {
            let mut terms = xs.iter().zip(active).map(|(x, &j)| matmul_transb(x, &self.factors_b[j]));
            let mut code = terms.next().expect("at least one active teammate")?;
            for t in terms {
                code.add_assign(&t?)?;
            }
            Ok(code)
        })
    }

    /// Reverse pass for [`forward`](Self::forward). `gs` are the upstream
    /// gradients on the outputs. The frozen weight receives no gradient.
    pub fn backward_tokens(&self, xs: &[DenseMatrix], gs: &[DenseMatrix], mask: &ActivationMask) -> Result<TeamGrads> {
        let active = self.check_mask(mask)?;
        self.check_inputs(xs, &active, self.in_dim(), "input")?;
        self.check_inputs(gs, &active, self.out_dim(), "gradient")?;
        if xs[0].rows() != gs[0].rows() {
            return Err(Error::shape("inputs and gradients carry different token counts"));
        }
        let mut grad_x = gs
            .iter()
            .map(|g| matmul(g, &self.weight))
            .collect::<Result<Vec<_>>>()?;
        let (grad_a, grad_b) = match self.mode {
            AdapterMode::FrozenOnly => (Vec::new(), Vec::new()),
            AdapterMode::Teamwork => ledger::with_kind(MacKind::LowRank, || -> Result<_> {
                let code = self.shared_code(xs, &active)?;
                let mut terms = gs.iter().zip(&active).map(|(g, &i)| matmul(g, &self.factors_a[i]));
                let mut u = terms.next().expect("at least one active teammate")?;
                for t in terms {
                    u.add_assign(&t?)?;
                }
                if self.scale != 1.0 {
                    u.scale(self.scale);
                }
                let mut grad_a = Vec::with_capacity(active.len());
                for g in gs {
                    let mut ga = matmul_transa(g, &code)?;
                    if self.scale != 1.0 {
                        ga.scale(self.scale);
                    }
                    grad_a.push(ga);
                }
                let mut grad_b = Vec::with_capacity(active.len());
                for ((x, gx), &j) in xs.iter().zip(grad_x.iter_mut()).zip(&active) {
                    grad_b.push(matmul_transa(&u, x)?);
                    gx.add_assign(&matmul(&u, &self.factors_b[j])?)?;
                }
                Ok((grad_a, grad_b))
            })?,
            AdapterMode::PerInstanceLora => ledger::with_kind(MacKind::LowRank, || -> Result<_> {
                let mut grad_a = Vec::with_capacity(active.len());
                let mut grad_b = Vec::with_capacity(active.len());
                for (((x, g), gx), &i) in xs.iter().zip(gs).zip(grad_x.iter_mut()).zip(&active) {
                    let code = matmul_transb(x, &self.factors_b[i])?;
                    let mut u = matmul(g, &self.factors_a[i])?;
                    let mut ga = matmul_transa(g, &code)?;
                    if self.scale != 1.0 {
                        u.scale(self.scale);
                        ga.scale(self.scale);
                    }
                    grad_a.push(ga);
                    grad_b.push(matmul_transa(&u, x)?);
                    gx.add_assign(&matmul(&u, &self.factors_b[i])?)?;
                }
                Ok((grad_a, grad_b))
            })?,
        };
        Ok(TeamGrads {
            teammates: active,
            grad_a,
            grad_b,
            grad_x,
        })
    }

    /// Factor-form evaluation of `block(W) x + dW x` for one feature vector
    /// per active teammate. Costs `|S| m n + |S| r (m + n)` MACs.
    pub fn forward_unmaterialized(&self, xs: &[DenseVector], mask: &ActivationMask) -> Result<Vec<DenseVector>> {
        self.require_mode(AdapterMode::Teamwork, "forward_unmaterialized")?;
        self.forward_vectors(xs, mask)
    }

    /// Independent LoRA per teammate: `y_i = W x_i + A_i (B_i x_i)`.
    pub fn forward_per_instance(&self, xs: &[DenseVector], mask: &ActivationMask) -> Result<Vec<DenseVector>> {
        self.require_mode(AdapterMode::PerInstanceLora, "forward_per_instance")?;
        self.forward_vectors(xs, mask)
    }

    fn forward_vectors(&self, xs: &[DenseVector], mask: &ActivationMask) -> Result<Vec<DenseVector>> {
        let rows: Vec<DenseMatrix> = xs.iter().map(DenseVector::as_row).collect();
        if rows.is_empty() {
            self.check_mask(mask)?;
            return Err(Error::shape("no input vectors"));
        }
        self.forward(&rows, mask)?
            .into_iter()
            .map(DenseVector::from_row)
            .collect()
    }

    /// The offset restricted to active teammates: an (|S| m) x (|S| n)
    /// matrix whose block (i, j) is `A_i B_j` in Teamwork mode,
    /// `A_i B_i` on the diagonal only in per-instance mode, and zero when
    /// frozen. Building it is weight preparation and is not counted.
    pub fn materialize_delta(&self, mask: &ActivationMask) -> Result<DenseMatrix> {
        let active = self.check_mask(mask)?;
        let (m, n) = (self.out_dim(), self.in_dim());
        let k = active.len();
        let mut delta = DenseMatrix::zeros(k * m, k * n);
        ledger::suspended(|| -> Result<()> {
            for (bi, &i) in active.iter().enumerate() {
                for (bj, &j) in active.iter().enumerate() {
                    let block = match self.mode {
                        AdapterMode::Teamwork => matmul(&self.factors_a[i], &self.factors_b[j])?,
                        AdapterMode::PerInstanceLora if i == j => matmul(&self.factors_a[i], &self.factors_b[j])?,
                        _ => continue,
                    };
                    delta.set_block(bi * m, bj * n, &block.scaled(self.scale))?;
                }
            }
            Ok(())
        })?;
        Ok(delta)
    }

    /// `block(W) + dW` over the active teammates.
    pub fn materialize(&self, mask: &ActivationMask) -> Result<DenseMatrix> {
        let mut full = self.materialize_delta(mask)?;
        let (m, n) = (self.out_dim(), self.in_dim());
        for b in 0..mask.active_count() {
            let mut block = full.block(b * m, b * n, m, n)?;
            block.add_assign(&self.weight)?;
            full.set_block(b * m, b * n, &block)?;
        }
        Ok(full)
    }

    /// Dense evaluation against the materialized `block(W) + dW`.
    /// Costs `|S|^2 m n` MACs.
    pub fn forward_materialized(&self, xs: &[DenseVector], mask: &ActivationMask) -> Result<Vec<DenseVector>> {
        let rows: Vec<DenseMatrix> = xs.iter().map(DenseVector::as_row).collect();
        if rows.is_empty() {
            self.check_mask(mask)?;
            return Err(Error::shape("no input vectors"));
        }
        self.forward_materialized_tokens(&rows, mask)?
            .into_iter()
            .map(DenseVector::from_row)
            .collect()
    }

    /// Token-block form of [`forward_materialized`](Self::forward_materialized):
    /// materializes once, then applies the dense matrix to every token.
    /// Costs `tokens |S|^2 m n` MACs.
    pub fn forward_materialized_tokens(&self, xs: &[DenseMatrix], mask: &ActivationMask) -> Result<Vec<DenseMatrix>> {
        self.require_mode(AdapterMode::Teamwork, "forward_materialized")?;
        let active = self.check_mask(mask)?;
        self.check_inputs(xs, &active, self.in_dim(), "input")?;
        let full = self.materialize(mask)?;
        let (m, n, tokens) = (self.out_dim(), self.in_dim(), xs[0].rows());
        // Row k of the joint input is token k of every teammate, concatenated.
        let joint = DenseMatrix::from_fn(tokens, active.len() * n, |k, c| xs[c / n][(k, c % n)]);
        let y = ledger::with_kind(MacKind::LowRank, || matmul_transb(&joint, &full))?;
        (0..active.len())
            .map(|b| y.block(0, b * m, tokens, m))
            .collect()
    }

    /// Analytic gradients for one feature vector per active teammate.
    ///
    /// With `s = sum_j B_j x_j` and `u = sum_i A_i^T g_i`:
    /// `dA_i = g_i s^T`, `dB_j = u x_j^T`, `dx_j = W^T g_j + B_j^T u`.
    pub fn backward(&self, xs: &[DenseVector], gs: &[DenseVector], mask: &ActivationMask) -> Result<TeamGrads> {
        self.require_mode(AdapterMode::Teamwork, "backward")?;
        let xr: Vec<DenseMatrix> = xs.iter().map(DenseVector::as_row).collect();
        let gr: Vec<DenseMatrix> = gs.iter().map(DenseVector::as_row).collect();
        if xr.is_empty() || gr.is_empty() {
            self.check_mask(mask)?;
            return Err(Error::shape("no input vectors"));
        }
        self.backward_tokens(&xr, &gr, mask)
    }
}
