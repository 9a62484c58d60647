use crate::error::Result;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: DenseMatrix,
    second: DenseMatrix,
    steps: i32,
}

/// Adam with per-parameter step counts. A parameter that receives no
/// gradient in a step is left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    slots: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: Vec::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Applies one update to parameter `slot`.
    pub fn update(&mut self, slot: usize, param: &mut DenseMatrix, grad: &DenseMatrix) -> Result<()> {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        let c = self.config;
        let state = self.slots[slot].get_or_insert_with(|| Moments {
            first: DenseMatrix::zeros(grad.rows(), grad.cols()),
            second: DenseMatrix::zeros(grad.rows(), grad.cols()),
            steps: 0,
        });
        state.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(state.steps);
        let bc2 = 1.0 - c.beta2.powi(state.steps);
        let m = state.first.data_mut();
        let v = state.second.data_mut();
        if param.shape() != grad.shape() {
            return Err(crate::error::Error::shape("parameter and gradient shapes differ"));
        }
        for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
        Ok(())
    }
}
