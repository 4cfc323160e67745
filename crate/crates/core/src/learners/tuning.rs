//! Inner cross-validated grid search for the nuisance learners.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::assign_folds;
use crate::error::{Error, Result};
use crate::learners::kernel_ridge::{
    cross_kernel, fit_grouped, landmark_indices, solve_exact, solve_nystrom, GroupedRows,
    KernelRidgeModel, KernelRidgeOptions, Standardization,
};
use crate::learners::quantile::{fit_quantile_regression, pinball};

fn default_gamma_scales() -> Vec<f64> {
    vec![0.01, 0.1, 1.0, 10.0]
}

fn default_lambdas() -> Vec<f64> {
    vec![1e-4, 1e-2, 1.0, 1e2]
}

fn default_inner_folds() -> usize {
    5
}

/// Candidate hyperparameters. RBF coefficients are `scale / d` for `d` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningGrid {
    #[serde(default = "default_gamma_scales")]
    pub gamma_scales: Vec<f64>,
    #[serde(default = "default_lambdas")]
    pub ridge_lambdas: Vec<f64>,
    #[serde(default = "default_lambdas")]
    pub quantile_lambdas: Vec<f64>,
    #[serde(default = "default_inner_folds")]
    pub inner_folds: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            gamma_scales: default_gamma_scales(),
            ridge_lambdas: default_lambdas(),
            quantile_lambdas: default_lambdas(),
            inner_folds: default_inner_folds(),
            seed: 0,
        }
    }
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, values) in [
            ("gamma_scales", &self.gamma_scales),
            ("ridge_lambdas", &self.ridge_lambdas),
            ("quantile_lambdas", &self.quantile_lambdas),
        ] {
            if values.is_empty() {
                return Err(Error::Config(format!("tuning grid '{name}' is empty")));
            }
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!(
                    "tuning grid '{name}' must hold finite non-negative values"
                )));
            }
        }
        if self.gamma_scales.iter().any(|&g| g <= 0.0) {
            return Err(Error::Config("gamma_scales must be positive".into()));
        }
        if self.inner_folds < 2 {
            return Err(Error::Config("inner_folds must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TuningObjective {
    MeanSquaredError,
    /// Mean held-out pinball loss at the given quantile level.
    Pinball(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectedHyperparameters {
    pub gamma: Option<f64>,
    pub lambda: f64,
    /// Mean held-out objective; `None` when the grid had a single candidate.
    pub cv_score: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    gamma: Option<f64>,
    lambda: f64,
    score: f64,
}

/// Lowest score wins; ties go to the larger penalty, then the smoother kernel
/// (smaller RBF coefficient). The rule does not depend on candidate order.
fn select(candidates: &[Candidate]) -> Result<Candidate> {
    let best = candidates.iter().map(|c| c.score).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::NonConvergence(
            "every tuning candidate failed to fit".into(),
        ));
    }
    let tol = 1e-12 * best.abs().max(1e-300);
    candidates
        .iter()
        .filter(|c| c.score <= best + tol)
        .copied()
        .reduce(|a, b| {
            if b.lambda > a.lambda
                || (b.lambda == a.lambda && b.gamma.unwrap_or(0.0) < a.gamma.unwrap_or(0.0))
            {
                b
            } else {
                a
            }
        })
        .ok_or_else(|| Error::Config("empty tuning grid".into()))
}

fn inner_splits(n: usize, grid: &TuningGrid) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if n < 2 * grid.inner_folds {
        return Err(Error::InsufficientData(format!(
            "tuning needs at least {} rows, got {n}",
            2 * grid.inner_folds
        )));
    }
    let folds = assign_folds(n, grid.inner_folds, grid.seed)?;
    Ok((0..grid.inner_folds)
        .map(|k| (folds.out_of_fold(k), folds.in_fold(k)))
        .collect())
}

pub fn tune_hyperparameters(
    features: &DMatrix<f64>,
    targets: &[f64],
    grid: &TuningGrid,
    objective: TuningObjective,
) -> Result<SelectedHyperparameters> {
    match objective {
        TuningObjective::MeanSquaredError => {
            let (sel, _) =
                tune_and_fit_kernel_ridge(features, targets, grid, &KernelRidgeOptions::default())?;
            Ok(sel)
        }
        TuningObjective::Pinball(alpha) => tune_quantile(features, targets, alpha, grid),
    }
}

/// Grid search over `(gamma, lambda)` by held-out MSE, then a final fit on all rows.
pub fn tune_and_fit_kernel_ridge(
    features: &DMatrix<f64>,
    targets: &[f64],
    grid: &TuningGrid,
    options: &KernelRidgeOptions,
) -> Result<(SelectedHyperparameters, KernelRidgeModel)> {
    grid.validate()?;
    if features.nrows() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            actual: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::InsufficientData("kernel ridge needs at least one row".into()));
    }
    let d = features.ncols().max(1) as f64;
    let standardization = Standardization::fit(features);
    let groups = GroupedRows::new(&standardization.apply(features));
    let gammas: Vec<f64> = grid.gamma_scales.iter().map(|s| s / d).collect();

    let single = gammas.len() == 1 && grid.ridge_lambdas.len() == 1;
    let selected = if single {
        SelectedHyperparameters {
            gamma: Some(gammas[0]),
            lambda: grid.ridge_lambdas[0],
            cv_score: None,
        }
    } else {
        let splits = inner_splits(targets.len(), grid)?;
        let candidates: Vec<Candidate> = gammas
            .par_iter()
            .flat_map_iter(|&gamma| {
                score_kernel_ridge_gamma(&groups, targets, &splits, gamma, &grid.ridge_lambdas, options)
                    .into_iter()
                    .zip(&grid.ridge_lambdas)
                    .map(move |(score, &lambda)| Candidate {
                        gamma: Some(gamma),
                        lambda,
                        score,
                    })
            })
            .collect();
        let best = select(&candidates)?;
        SelectedHyperparameters {
            gamma: best.gamma,
            lambda: best.lambda,
            cv_score: Some(best.score),
        }
    };

    let all: Vec<usize> = (0..targets.len()).collect();
    let (counts, sums) = groups.accumulate(&all, targets);
    let model = fit_grouped(
        &groups,
        &counts,
        &sums,
        selected.gamma.unwrap_or(gammas[0]),
        selected.lambda,
        standardization,
        options,
    )?;
    Ok((selected, model))
}

/// Mean held-out MSE for each lambda at a fixed gamma; failed cells score +inf.
fn score_kernel_ridge_gamma(
    groups: &GroupedRows,
    targets: &[f64],
    splits: &[(Vec<usize>, Vec<usize>)],
    gamma: f64,
    lambdas: &[f64],
    options: &KernelRidgeOptions,
) -> Vec<f64> {
    let m = groups.len();
    let exact = m <= options.max_exact_support;
    let all: Vec<usize> = (0..m).collect();
    let (gram, landmarks) = if exact {
        (groups.gram(gamma), Vec::new())
    } else {
        let lm = landmark_indices(m, options);
        (cross_kernel(&groups.points, &all, &groups.points, &lm, gamma), lm)
    };
    let k_ll = if exact {
        None
    } else {
        Some(cross_kernel(&groups.points, &landmarks, &groups.points, &landmarks, gamma))
    };

    lambdas
        .iter()
        .map(|&lambda| {
            let mut total = 0.0;
            for (train, held) in splits {
                let (counts, sums) = groups.accumulate(train, targets);
                let preds: Result<Vec<f64>> = if exact {
                    let active: Vec<usize> = (0..m).filter(|&g| counts[g] > 0.0).collect();
                    solve_exact(&gram, &active, &counts, &sums, lambda).map(|w| {
                        (0..m)
                            .map(|g| active.iter().zip(&w).map(|(&a, wa)| gram[(g, a)] * wa).sum())
                            .collect()
                    })
                } else {
                    let k_ll = k_ll.as_ref().expect("landmark gram");
                    solve_nystrom(&gram, k_ll, &counts, &sums, lambda).map(|w| {
                        (0..m)
                            .map(|g| (0..w.len()).map(|l| gram[(g, l)] * w[l]).sum())
                            .collect()
                    })
                };
                match preds {
                    Ok(p) => {
                        let sse: f64 = held
                            .iter()
                            .map(|&i| {
                                let e = targets[i] - p[groups.group_of[i]];
                                e * e
                            })
                            .sum();
                        total += sse / held.len() as f64;
                    }
                    Err(_) => return f64::INFINITY,
                }
            }
            total / splits.len() as f64
        })
        .collect()
}

/// Grid search over the quantile penalty by mean held-out pinball loss.
pub fn tune_quantile(
    design: &DMatrix<f64>,
    targets: &[f64],
    alpha: f64,
    grid: &TuningGrid,
) -> Result<SelectedHyperparameters> {
    grid.validate()?;
    if grid.quantile_lambdas.len() == 1 || design.ncols() == 1 {
        // an intercept-only design is unpenalized, so every lambda is equivalent
        let lambda = grid.quantile_lambdas.iter().copied().fold(0.0, f64::max);
        let lambda = if grid.quantile_lambdas.len() == 1 {
            grid.quantile_lambdas[0]
        } else {
            lambda
        };
        return Ok(SelectedHyperparameters {
            gamma: None,
            lambda,
            cv_score: None,
        });
    }
    let splits = inner_splits(targets.len(), grid)?;
    let candidates: Vec<Candidate> = grid
        .quantile_lambdas
        .par_iter()
        .map(|&lambda| {
            let mut total = 0.0;
            for (train, held) in &splits {
                let d_train = design.select_rows(train.iter());
                let y_train: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
                match fit_quantile_regression(&d_train, &y_train, alpha, lambda) {
                    Ok(fit) => {
                        let beta = nalgebra::DVector::from_column_slice(&fit.coefficients);
                        let d_held = design.select_rows(held.iter());
                        let pred = d_held * beta;
                        let loss: f64 = held
                            .iter()
                            .zip(pred.iter())
                            .map(|(&i, p)| pinball(targets[i] - p, alpha))
                            .sum();
                        total += loss / held.len() as f64;
                    }
                    Err(_) => {
                        return Candidate {
                            gamma: None,
                            lambda,
                            score: f64::INFINITY,
                        }
                    }
                }
            }
            Candidate {
                gamma: None,
                lambda,
                score: total / splits.len() as f64,
            }
        })
        .collect();
    let best = select(&candidates)?;
    Ok(SelectedHyperparameters {
        gamma: None,
        lambda: best.lambda,
        cv_score: Some(best.score),
    })
}
