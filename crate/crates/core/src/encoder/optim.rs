//! SGD and Adam over flat tensor lists.

use serde::{Deserialize, Serialize};

use super::{EncoderGrads, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Per-tensor moment buffers. SGD keeps none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub adam: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        let buffers = || match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => shapes.iter().map(|&n| vec![0.0; n]).collect(),
        };
        OptimizerState {
            kind,
            adam: AdamConfig::default(),
            step: 0,
            first_moment: buffers(),
            second_moment: buffers(),
        }
    }

    pub fn for_params(kind: OptimizerKind, params: &EncoderParams) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(kind, &shapes)
    }

    /// One update of `params -= lr · direction(grads)`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::Shape("parameter and gradient tensors differ".into()));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.iter_mut().zip(g.iter()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len()
                    || self.first_moment.iter().zip(grads).any(|(m, g)| m.len() != g.len())
                {
                    return Err(Error::Shape("optimizer state does not match parameters".into()));
                }
                let AdamConfig { beta1, beta2, eps } = self.adam;
                let t = self.step as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[k];
                    let v = &mut self.second_moment[k];
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies one optimizer step to the encoder.
pub fn apply_update(
    params: &mut EncoderParams,
    grads: &EncoderGrads,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    state.step(&mut p, &g, lr)
}
