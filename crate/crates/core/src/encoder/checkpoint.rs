//! JSON checkpoint container.
//!
//! Layout (version 1):
//!
//! ```text
//! {
//!   "format": "unremix-checkpoint",
//!   "version": 1,
//!   "dims": [d_in, hidden..., d_prev, d],
//!   "hidden": [{"weight": [row-major out×in], "bias": [out]}, ...],
//!   "last": [row-major d×d_prev],
//!   "optimizer": {...},          // kind, step, moment buffers in tensor order
//!   "aggregation_logits": [l_u, l_s, l_r],
//!   "lambda_optimizer": {...},
//!   "seed": u64,
//!   "step": u64
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dense, EncoderParams, OptimizerState};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_FORMAT: &str = "unremix-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseRecord {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    format: String,
    version: u32,
    dims: Vec<usize>,
    hidden: Vec<DenseRecord>,
    last: Vec<f64>,
    optimizer: OptimizerState,
    aggregation_logits: [f64; 3],
    lambda_optimizer: OptimizerState,
    seed: u64,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub optimizer: OptimizerState,
    pub aggregation_logits: [f64; 3],
    pub lambda_optimizer: OptimizerState,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let record = CheckpointRecord {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dims: self.params.dims(),
            hidden: self
                .params
                .hidden
                .iter()
                .map(|l| DenseRecord {
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
            last: self.params.last.data().to_vec(),
            optimizer: self.optimizer.clone(),
            aggregation_logits: self.aggregation_logits,
            lambda_optimizer: self.lambda_optimizer.clone(),
            seed: self.seed,
            step: self.step,
        };
        Ok(serde_json::to_string_pretty(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: CheckpointRecord = serde_json::from_str(text)?;
        if r.format != CHECKPOINT_FORMAT {
            return Err(Error::Usage(format!("not a checkpoint: format `{}`", r.format)));
        }
        if r.version != CHECKPOINT_VERSION {
            return Err(Error::Usage(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                r.version
            )));
        }
        let dims = &r.dims;
        if dims.len() < 2 || r.hidden.len() != dims.len() - 2 {
            return Err(Error::Shape(format!(
                "dims {dims:?} do not match {} hidden layers",
                r.hidden.len()
            )));
        }
        let hidden = r
            .hidden
            .into_iter()
            .enumerate()
            .map(|(l, rec)| {
                Ok(Dense {
                    weight: Matrix::from_vec(dims[l + 1], dims[l], rec.weight)?,
                    bias: rec.bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = dims.len();
        let last = Matrix::from_vec(dims[n - 1], dims[n - 2], r.last)?;
        Ok(Checkpoint {
            params: EncoderParams::new(hidden, last)?,
            optimizer: r.optimizer,
            aggregation_logits: r.aggregation_logits,
            lambda_optimizer: r.lambda_optimizer,
            seed: r.seed,
            step: r.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
