//! End-to-end analysis: load, estimate over the `alpha` grid, characterize,
//! and write the result files atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::config::AnalysisConfig;
use crate::data::{assign_folds, assign_folds_stratified, build_frame, compute_losses, load_dataset, Column};
use crate::error::{Error, Result};
use crate::estimator::{risk_curve, FoldSummary, WorstCaseEstimate};
use crate::oracle::rho_from_alpha;
use crate::report::{characterize_subsample, compare_on_subsamples, emit_plot_data, RiskCurve, SubsampleReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct CurvePoint<'a> {
    alpha: f64,
    rho: f64,
    r_hat: f64,
    sigma2_hat: f64,
    ci_level: f64,
    ci_lower: f64,
    ci_upper: f64,
    subsample_size: usize,
    epsilon_used: f64,
    folds: &'a [FoldSummary],
    warnings: &'a [String],
}

#[derive(Serialize)]
struct Results<'a> {
    schema_version: u32,
    config: &'a AnalysisConfig,
    n_rows: usize,
    fold_sizes: Vec<usize>,
    fold_seed: u64,
    noise_seed: u64,
    curve: Vec<CurvePoint<'a>>,
    reports: &'a [SubsampleReport],
    comparison_curves: &'a BTreeMap<String, Vec<f64>>,
}

/// What [`run_analysis`] produced and where it was written.
#[derive(Debug)]
pub struct AnalysisOutput {
    pub curve: RiskCurve,
    pub files: Vec<PathBuf>,
}

/// Runs the full pipeline. The config is validated before data is read, and
/// nothing is written unless every step succeeds.
pub fn run_analysis(config: &AnalysisConfig) -> Result<AnalysisOutput> {
    config.validate()?;
    let out_dir = config.output_dir.clone().expect("validated");

    let dataset = Arc::new(load_dataset(&config.data.path, &config.data.schema)?);
    let losses = compute_losses(&dataset, &config.loss)?;
    let n = dataset.n_rows();
    let est = &config.estimator;
    let folds = match &est.stratify_folds_by {
        Some(name) => match dataset.column(name) {
            Some(Column::Categorical(labels)) => assign_folds_stratified(labels, est.k_folds, est.seed)?,
            _ => return Err(Error::Config(format!("'{name}' is not a categorical column"))),
        },
        None => assign_folds(n, est.k_folds, est.seed)?,
    };
    let frame = build_frame(dataset, &config.partition, losses, folds)?;

    let estimates = risk_curve(&frame, &config.alpha_grid, &est.at_alpha(config.alpha_grid[0]))?;
    let reports = if config.report.characterize {
        estimates
            .iter()
            .map(|e| characterize_subsample(&frame, &e.h_indicators, e.alpha, config.report.outcome_column.as_deref()))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut comparison_curves = BTreeMap::new();
    for name in &config.report.comparison_loss_columns {
        comparison_curves.insert(name.clone(), compare_on_subsamples(&frame, &estimates, name)?);
    }
    let curve = RiskCurve {
        alpha_grid: config.alpha_grid.clone(),
        estimates,
        reports,
        comparison_curves,
    };

    let results = Results {
        schema_version: SCHEMA_VERSION,
        config,
        n_rows: n,
        fold_sizes: frame.folds.fold_sizes(),
        fold_seed: est.seed,
        noise_seed: est.seed,
        curve: curve
            .estimates
            .iter()
            .map(curve_point)
            .collect::<Result<_>>()?,
        reports: &curve.reports,
        comparison_curves: &curve.comparison_curves,
    };
    let json = serde_json::to_string_pretty(&results)? + "\n";

    let files = write_atomically(&out_dir, |staging| {
        fs::write(staging.join("results.json"), &json)?;
        write_curve_csv(&staging.join("curve.csv"), &curve.estimates)?;
        write_indicators_csv(&staging.join("h_indicators.csv"), &frame.row_ids, &curve.estimates)?;
        if config.report.plot_data {
            emit_plot_data(&curve, staging)?;
        }
        Ok(())
    })?;
    Ok(AnalysisOutput { curve, files })
}

fn curve_point(e: &WorstCaseEstimate) -> Result<CurvePoint<'_>> {
    Ok(CurvePoint {
        alpha: e.alpha,
        rho: rho_from_alpha(e.alpha)?,
        r_hat: e.r_hat,
        sigma2_hat: e.sigma2_hat,
        ci_level: e.ci_level,
        ci_lower: e.ci_lower,
        ci_upper: e.ci_upper,
        subsample_size: e.subsample_size,
        epsilon_used: e.epsilon_used,
        folds: &e.folds,
        warnings: &e.warnings,
    })
}

fn write_curve_csv(path: &Path, estimates: &[WorstCaseEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "r_hat", "ci_lo", "ci_hi", "sigma2"])?;
    for e in estimates {
        w.write_record([e.alpha, e.r_hat, e.ci_lower, e.ci_upper, e.sigma2_hat].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_indicators_csv(path: &Path, row_ids: &[usize], estimates: &[WorstCaseEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row_id", "alpha", "h"])?;
    for e in estimates {
        let alpha = e.alpha.to_string();
        for (id, h) in row_ids.iter().zip(&e.h_indicators) {
            w.write_record([id.to_string().as_str(), alpha.as_str(), if *h == 1 { "1" } else { "0" }])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes into a staging directory next to `out_dir`, then renames each file
/// into place. On failure the staging directory and any moved files are removed.
fn write_atomically(out_dir: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let staging = tempfile::Builder::new().prefix(".staging-").tempdir_in(out_dir)?;
    write(staging.path())?;
    let mut names: Vec<PathBuf> = fs::read_dir(staging.path())?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    let mut moved = Vec::new();
    for src in names {
        let dst = out_dir.join(src.file_name().expect("file"));
        if let Err(e) = fs::rename(&src, &dst) {
            for m in &moved {
                let _ = fs::remove_file(m);
            }
            return Err(e.into());
        }
        moved.push(dst);
    }
    Ok(moved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AnalysisConfig;

    fn write_config(dir: &Path, grid: &str, partition: &str) -> PathBuf {
        fs::write(dir.join("d.csv"), "w,z,loss\n0,0,0\n1,0,1\n0,1,1\n1,1,0\n0,0,1\n1,1,1\n0,1,0\n1,0,0\n0,0,1\n1,1,1\n").unwrap();
        let text = format!(
            r#"
alpha_grid = {grid}
output_dir = "out"

[data]
path = "d.csv"
schema = {{ w = "categorical", z = "categorical", loss = "numeric" }}

[partition]
{partition}

[loss]
kind = "precomputed"
loss_column = "loss"

[estimator]
k_folds = 2
"#
        );
        let path = dir.join("c.toml");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn alpha_zero_writes_mean() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[0.0]", "mutable_w = [\"w\"]\nimmutable_z = [\"z\"]");
        let cfg = AnalysisConfig::load(&path).unwrap();
        let out = run_analysis(&cfg).unwrap();
        assert_eq!(out.curve.estimates[0].r_hat, 0.6);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("out/results.json")).unwrap()).unwrap();
        assert_eq!(json["schema_version"], 1);
        assert_eq!(json["curve"][0]["r_hat"], 0.6);
        assert_eq!(json["config"]["estimator"]["ci_level"], 0.95);
        let h = fs::read_to_string(dir.path().join("out/h_indicators.csv")).unwrap();
        assert_eq!(h.lines().count(), 11);
        let entries: Vec<_> = fs::read_dir(dir.path().join("out")).unwrap().collect();
        assert!(entries
            .iter()
            .all(|e| !e.as_ref().unwrap().file_name().to_string_lossy().starts_with(".staging")));
    }

    #[test]
    fn invalid_partition_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[0.0]", "mutable_w = [\"w\"]\nimmutable_z = [\"w\"]");
        let cfg = AnalysisConfig::load(&path).unwrap();
        let err = run_analysis(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn failure_after_staging_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let r = write_atomically(&out, |staging| {
            fs::write(staging.join("results.json"), "{}")?;
            Err(Error::NonConvergence("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
    }
}
