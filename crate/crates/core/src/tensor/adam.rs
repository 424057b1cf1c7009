use serde::{Deserialize, Serialize};

use super::{Matrix, TensorError};

/// Adam hyperparameters. Weight decay is coupled: `decay * param` is added
/// to the gradient before the moment updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` using the matching `grads`.
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[Option<&Matrix>],
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::MissingGradient { index: grads.len() });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(TensorError::ParameterCount {
                expected: self.first.len(),
                got: params.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or(TensorError::MissingGradient { index: i })?;
            if g.shape() != p.shape() || self.first[i].shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            step_size,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].expect("checked above");
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for (((w, &gv), mv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                let grad = gv + weight_decay * *w;
                *mv = beta1 * *mv + (1.0 - beta1) * grad;
                *vv = beta2 * *vv + (1.0 - beta2) * grad * grad;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *w -= step_size * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
