//! End-to-end models: hyperparameter fitting, output-space prediction,
//! metrics, synthetic data and model files.

mod fit;
mod io;
mod predict;
mod sample;

use nalgebra::DMatrix;

pub use fit::{fit, fit_from_starts, taylor_candidates, FitOptions, FitResult, FitStrategy, Optimum};
pub use io::{ModelFile, MODEL_FORMAT, MODEL_VERSION};
pub use predict::{evaluate, nlp_contributions, predict, predict_with, Metrics, PredictiveDistribution};
pub use sample::{sample_dataset, SampledData};

use crate::efd::LikelihoodFamily;
use crate::error::{GgpmError, Result};
use crate::inference::{apply_hypers, check_data, current_hypers, infer, Engine, InferenceResult};
use crate::kernels::KernelSpec;

/// Likelihood, kernel and engine together with the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct GgpmModel {
    pub lik: LikelihoodFamily,
    pub kernel: KernelSpec,
    pub engine: Engine,
    x: DMatrix<f64>,
    y: Vec<f64>,
}

impl GgpmModel {
    pub fn new(
        lik: LikelihoodFamily,
        kernel: KernelSpec,
        engine: Engine,
        x: DMatrix<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        check_data(&lik, &x, &y)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GgpmError::NonFinite("training inputs".into()));
        }
        Ok(Self { lik, kernel, engine, x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// (log kernel hyperparameters..., log phi).
    pub fn hypers(&self) -> Vec<f64> {
        current_hypers(&self.lik, &self.kernel)
    }

    pub fn with_hypers(&self, hypers: &[f64]) -> Result<Self> {
        let (lik, kernel) = apply_hypers(&self.lik, &self.kernel, hypers)?;
        Ok(Self { lik, kernel, ..self.clone() })
    }

    pub fn with_engine(&self, engine: Engine) -> Self {
        Self { engine, ..self.clone() }
    }

    /// Runs the model's engine at the current hyperparameters.
    pub fn infer(&self) -> Result<InferenceResult> {
        infer(&self.engine, &self.lik, &self.kernel, &self.x, &self.y)
    }
}
