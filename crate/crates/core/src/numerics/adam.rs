use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam optimizer with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    #[serde(skip)]
    first: Vec<Vec<f64>>,
    #[serde(skip)]
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        let ok = |bufs: &[Vec<f64>]| {
            bufs.len() == self.first.len() && bufs.iter().zip(&self.first).all(|(a, b)| a.len() == b.len())
        };
        if !ok(&first) || !ok(&second) {
            return Err(Error::contract("adam moment buffers do not match parameter shapes"));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update to every trainable parameter, then zeroes all
    /// gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let trainable = params.is_trainable(id);
            let tensor = params.get_mut(id);
            if !trainable {
                continue;
            }
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            if m.len() != tensor.numel() {
                return Err(Error::contract(format!(
                    "moment buffer for parameter {} has length {}, expected {}",
                    id.index(),
                    m.len(),
                    tensor.numel()
                )));
            }
            let (data, grad) = tensor.data_and_grad_mut();
            let Some(grad) = grad else {
                return Err(Error::contract(format!("parameter {} has no gradient", id.index())));
            };
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when no clipping happened).
pub fn clip_gradients(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    // Relative slack keeps a second application from rescaling by 1 - ulp.
    if norm.is_nan() || norm <= max_norm * (1.0 + 1e-12) {
        return 1.0;
    }
    let factor = max_norm / norm;
    for id in params.ids().collect::<Vec<_>>() {
        if let Some(g) = params.get_mut(id).grad_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
    factor
}
