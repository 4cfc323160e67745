//! Nuisance learners: a conditional-mean regressor over all features and a
//! conditional-quantile regressor over the immutable features.
//!
//! The estimator only talks to the [`MeanLearner`] and [`QuantileLearner`]
//! traits, so any learner with the same fit/predict contract can be swapped in.

pub mod kernel_ridge;
pub mod quantile;
pub mod spline;
pub mod tuning;

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use kernel_ridge::{
    fit_kernel_ridge, fit_kernel_ridge_with, predict_kernel_ridge, KernelRidgeModel,
    KernelRidgeOptions,
};
pub use quantile::{
    fit_quantile_regression, fit_quantile_regression_with, lower_quantile, pinball,
    predict_quantile, LinearQuantileFit, QuantileFitOptions, QuantileModel,
};
pub use spline::{build_spline_basis, FittedBasis, SplineBasisConfig};
pub use tuning::{tune_hyperparameters, SelectedHyperparameters, TuningGrid, TuningObjective};

/// A fitted model that maps a feature block to one prediction per row.
pub trait Predictor: Send + Sync + Debug {
    fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>>;
}

impl Predictor for KernelRidgeModel {
    fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        predict_kernel_ridge(self, features)
    }
}

impl Predictor for QuantileModel {
    fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        predict_quantile(self, features)
    }
}

/// A fitted nuisance together with what was selected and anything worth reporting.
#[derive(Clone, Debug)]
pub struct FittedLearner {
    pub predictor: Arc<dyn Predictor>,
    pub hyperparameters: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl FittedLearner {
    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.predictor.predict(features)
    }
}

/// Regresses losses on the `[W | Z]` feature block.
pub trait MeanLearner: Send + Sync + Debug {
    fn fit(&self, features: &DMatrix<f64>, targets: &[f64], seed: u64) -> Result<FittedLearner>;
}

/// Regresses the `level` conditional quantile of `targets` on the `Z` block.
pub trait QuantileLearner: Send + Sync + Debug {
    fn fit(
        &self,
        z_block: &DMatrix<f64>,
        z_names: &[String],
        targets: &[f64],
        level: f64,
        seed: u64,
    ) -> Result<FittedLearner>;
}

/// RBF kernel ridge with inner cross-validated `(gamma, lambda)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelRidgeLearner {
    #[serde(default)]
    pub grid: TuningGrid,
    #[serde(default)]
    pub options: KernelRidgeOptions,
}

impl MeanLearner for KernelRidgeLearner {
    fn fit(&self, features: &DMatrix<f64>, targets: &[f64], seed: u64) -> Result<FittedLearner> {
        let grid = TuningGrid {
            seed: self.grid.seed ^ seed,
            ..self.grid.clone()
        };
        let options = KernelRidgeOptions {
            seed: self.options.seed ^ seed,
            ..self.options.clone()
        };
        let (selected, model) =
            tuning::tune_and_fit_kernel_ridge(features, targets, &grid, &options)?;
        let mut hyperparameters = BTreeMap::new();
        hyperparameters.insert("gamma".to_string(), model.bandwidth_gamma);
        hyperparameters.insert("lambda".to_string(), selected.lambda);
        if let Some(score) = selected.cv_score {
            hyperparameters.insert("cv_mse".to_string(), score);
        }
        let mut warnings = Vec::new();
        if model.nystrom {
            warnings.push(format!(
                "mean learner used a {}-landmark Nystrom approximation",
                model.dual_weights.len()
            ));
        }
        Ok(FittedLearner {
            predictor: Arc::new(model),
            hyperparameters,
            warnings,
        })
    }
}

/// Linear quantile regression on a cubic B-spline basis of `Z`, with the ridge
/// penalty chosen by inner cross-validated pinball loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineQuantileLearner {
    #[serde(default)]
    pub basis: SplineBasisConfig,
    #[serde(default)]
    pub grid: TuningGrid,
}

impl QuantileLearner for SplineQuantileLearner {
    fn fit(
        &self,
        z_block: &DMatrix<f64>,
        z_names: &[String],
        targets: &[f64],
        level: f64,
        seed: u64,
    ) -> Result<FittedLearner> {
        let (design, basis) = build_spline_basis(z_block, z_names, &self.basis)?;
        let grid = TuningGrid {
            seed: self.grid.seed ^ seed,
            ..self.grid.clone()
        };
        let selected = tuning::tune_quantile(&design, targets, level, &grid)?;
        let fit = fit_quantile_regression(&design, targets, level, selected.lambda)?;
        let mut warnings = Vec::new();
        if !fit.converged {
            warnings.push(format!(
                "quantile regression at level {level} stopped after {} iterations",
                fit.iterations
            ));
        }
        for name in &basis.degenerate_columns {
            warnings.push(format!("immutable column '{name}' is constant"));
        }
        let mut hyperparameters = BTreeMap::new();
        hyperparameters.insert("lambda".to_string(), selected.lambda);
        if let Some(score) = selected.cv_score {
            hyperparameters.insert("cv_pinball".to_string(), score);
        }
        Ok(FittedLearner {
            predictor: Arc::new(QuantileModel { basis, fit }),
            hyperparameters,
            warnings,
        })
    }
}
