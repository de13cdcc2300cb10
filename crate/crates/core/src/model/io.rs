use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::GgpmModel;
use crate::efd::LikelihoodFamily;
use crate::error::{GgpmError, Result};
use crate::inference::Engine;
use crate::kernels::KernelSpec;

pub const MODEL_FORMAT: &str = "ggpm-model";
pub const MODEL_VERSION: u32 = 1;

/// Self-describing JSON form of a fitted model. The training data are
/// embedded so predictions can be rebuilt exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    /// Catalog id the likelihood was built from, when known.
    pub likelihood_id: Option<String>,
    pub likelihood: LikelihoodFamily,
    pub kernel: KernelSpec,
    pub engine: Engine,
    /// (log kernel hyperparameters..., log phi)
    pub hypers: Vec<f64>,
    pub log_marginal: f64,
    pub input_columns: Vec<String>,
    pub data_source: Option<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl ModelFile {
    pub fn from_model(model: &GgpmModel, log_marginal: f64) -> Self {
        let x = model.x();
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            likelihood_id: None,
            likelihood: model.lik.clone(),
            kernel: model.kernel.clone(),
            engine: model.engine.clone(),
            hypers: model.hypers(),
            log_marginal,
            input_columns: (0..x.ncols()).map(|j| format!("x{j}")).collect(),
            data_source: None,
            x: x.row_iter().map(|r| r.iter().copied().collect()).collect(),
            y: model.y().to_vec(),
        }
    }

    pub fn to_model(&self) -> Result<GgpmModel> {
        let n = self.x.len();
        let d = self.x.first().map_or(0, |r| r.len());
        if self.x.iter().any(|r| r.len() != d) {
            return Err(GgpmError::Format("ragged input rows".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| self.x[i][j]);
        let base =
            GgpmModel::new(self.likelihood.clone(), self.kernel.clone(), self.engine.clone(), x, self.y.clone())?;
        base.with_hypers(&self.hypers)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| GgpmError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text).map_err(|e| GgpmError::Format(e.to_string()))?;
        if f.format != MODEL_FORMAT {
            return Err(GgpmError::Format(format!("expected format '{MODEL_FORMAT}', found '{}'", f.format)));
        }
        if f.version != MODEL_VERSION {
            return Err(GgpmError::Format(format!("unsupported model version {}", f.version)));
        }
        Ok(f)
    }
}
