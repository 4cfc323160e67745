//! Declarative analysis configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ColumnType, LossKind, LossSpec, Schema, VariablePartition};
use crate::error::{Error, Result};
use crate::estimator::{validate_alpha_grid, EstimatorConfig};
use crate::learners::{KernelRidgeLearner, SplineQuantileLearner};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// CSV path; relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    pub schema: Schema,
}

fn default_k_folds() -> usize {
    5
}

fn default_ci_level() -> f64 {
    0.95
}

/// Estimator settings shared by every point of the `alpha` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    #[serde(default)]
    pub discrete_noise_epsilon: Option<f64>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub seed: u64,
    /// Categorical label column to stratify folds by; plain random folds when absent.
    #[serde(default)]
    pub stratify_folds_by: Option<String>,
    #[serde(default)]
    pub mean_learner: KernelRidgeLearner,
    #[serde(default)]
    pub quantile_learner: SplineQuantileLearner,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            k_folds: default_k_folds(),
            discrete_noise_epsilon: None,
            ci_level: default_ci_level(),
            seed: 0,
            stratify_folds_by: None,
            mean_learner: KernelRidgeLearner::default(),
            quantile_learner: SplineQuantileLearner::default(),
        }
    }
}

impl EstimatorSection {
    pub fn at_alpha(&self, alpha: f64) -> EstimatorConfig {
        EstimatorConfig {
            alpha,
            k_folds: self.k_folds,
            discrete_noise_epsilon: self.discrete_noise_epsilon,
            ci_level: self.ci_level,
            seed: self.seed,
            mean_learner: self.mean_learner.clone(),
            quantile_learner: self.quantile_learner.clone(),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "default_true")]
    pub characterize: bool,
    /// Column correlated with each mutable column inside the subsamples.
    #[serde(default)]
    pub outcome_column: Option<String>,
    /// Alternative loss columns averaged over the same subsamples.
    #[serde(default)]
    pub comparison_loss_columns: Vec<String>,
    #[serde(default = "default_true")]
    pub plot_data: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            characterize: true,
            outcome_column: None,
            comparison_loss_columns: Vec::new(),
            plot_data: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub data: DataSection,
    pub partition: VariablePartition,
    pub loss: LossSpec,
    pub alpha_grid: Vec<f64>,
    /// Relative paths are resolved against the config file's directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl AnalysisConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_error)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.path = base.join(&cfg.data.path);
        if let Some(out) = &cfg.output_dir {
            cfg.output_dir = Some(base.join(out));
        }
        Ok(cfg)
    }

    /// Checks the configuration against itself and the declared schema,
    /// without reading data.
    pub fn validate(&self) -> Result<()> {
        if self.data.schema.is_empty() {
            return Err(Error::Config("data.schema declares no columns".into()));
        }
        validate_alpha_grid(&self.alpha_grid)?;
        self.partition.validate()?;
        self.partition.validate_against(&self.data.schema)?;
        self.loss.validate()?;
        self.estimator.at_alpha(0.0).validate_shared()?;
        let need = |name: &str, what: &str| -> Result<ColumnType> {
            self.data
                .schema
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("{what} column '{name}' is not in data.schema")))
        };
        for (name, what) in [
            (&self.loss.prediction_column, "prediction"),
            (&self.loss.label_column, "label"),
            (&self.loss.loss_column, "loss"),
            (&self.report.outcome_column, "outcome"),
        ] {
            if let Some(name) = name {
                need(name, what)?;
            }
        }
        if self.loss.kind == LossKind::ZeroOne {
            for name in [&self.loss.prediction_column, &self.loss.label_column].into_iter().flatten() {
                if need(name, "zero-one")? != ColumnType::Categorical {
                    return Err(Error::Config(format!(
                        "zero-one loss needs categorical codes, but '{name}' is numeric"
                    )));
                }
            }
        }
        for name in &self.report.comparison_loss_columns {
            need(name, "comparison")?;
        }
        if let Some(name) = &self.estimator.stratify_folds_by {
            if need(name, "stratification")? != ColumnType::Categorical {
                return Err(Error::Config(format!(
                    "fold stratification column '{name}' must be categorical"
                )));
            }
        }
        if self.output_dir.is_none() {
            return Err(Error::Config("no output directory given".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
alpha_grid = [0.0]
output_dir = "out"

[data]
path = "d.csv"
schema = { w = "categorical", z = "numeric", loss = "numeric" }

[partition]
mutable_w = ["w"]
immutable_z = ["z"]

[loss]
kind = "precomputed"
loss_column = "loss"
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = AnalysisConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.estimator.k_folds, 5);
        assert_eq!(cfg.estimator.ci_level, 0.95);
        assert_eq!(cfg.estimator.mean_learner.grid.gamma_scales, vec![0.01, 0.1, 1.0, 10.0]);
        assert_eq!(cfg.estimator.quantile_learner.basis.degree, 3);
        assert_eq!(cfg.loss.clip_epsilon, 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let cfg = AnalysisConfig::from_toml_str(MINIMAL).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(AnalysisConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn overlap_names_both_columns() {
        let text = MINIMAL.replace("immutable_z = [\"z\"]", "immutable_z = [\"w\"]");
        let err = AnalysisConfig::from_toml_str(&text).unwrap().validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("'w'"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let text = MINIMAL.replace("[loss]", "[loss]\ncolour = 1");
        assert!(matches!(AnalysisConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("alpha_grid = [0.0]", "alpha_grid = [0.5, 0.2]");
        let cfg = AnalysisConfig::from_toml_str(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let text = MINIMAL.replace("loss_column = \"loss\"", "loss_column = \"nope\"");
        let cfg = AnalysisConfig::from_toml_str(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = AnalysisConfig::load(&path).unwrap();
        assert_eq!(cfg.data.path, dir.path().join("d.csv"));
        assert_eq!(cfg.output_dir, Some(dir.path().join("out")));
    }
}
