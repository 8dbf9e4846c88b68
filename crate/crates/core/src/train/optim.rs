use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::ParamStore;

/// Adam with global gradient-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, clip: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<f64, TrainError> {
        if grads.len() != self.m.len() {
            return Err(TrainError::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            let bad = grads
                .iter()
                .position(|g| g.iter().any(|v| !v.is_finite()))
                .and_then(|i| store.ids().nth(i))
                .map_or_else(|| "<overflow>".to_string(), |id| store.name(id).to_string());
            return Err(TrainError::NonFinite(format!("gradient of `{bad}`")));
        }
        let scale = if norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, tensor) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grads[k][i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}
