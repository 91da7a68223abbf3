//! Adam optimizer with bias correction.

use crate::error::{Error, Result};

/// Optimizer state: first/second moment estimates per parameter tensor plus
/// the shared step counter and hyperparameters. The step counter increases by
/// exactly one per [`AdamState::step`] call.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32, param_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// One Adam update over aligned parameter/gradient lists. `params[i]`
    /// must match the size the state was created with.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam_step: expected {} parameter groups, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(format!(
                    "adam_step: group {i} length mismatch ({} state, {} param, {} grad)",
                    self.m[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Polynomial (power 1) decay to zero over the epoch budget:
/// `lr0 * (1 - epoch/total)`.
pub fn poly_decay_lr(lr0: f32, epoch: usize, total_epochs: usize) -> f32 {
    debug_assert!(epoch < total_epochs.max(1));
    lr0 * (1.0 - epoch as f32 / total_epochs.max(1) as f32)
}
