//! Cross-fitted debiased estimation of the worst-case risk over all
//! `(1 - alpha)`-subpopulations that keep the distribution of `Z` fixed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{EvaluationFrame, FoldAssignment};
use crate::error::{Error, Result};
use crate::learners::{
    FittedLearner, KernelRidgeLearner, MeanLearner, QuantileLearner, SplineQuantileLearner,
};

/// Noise scale used when some mutable column is discrete and none is configured.
pub const DEFAULT_DISCRETE_NOISE: f64 = 1e-5;

fn default_k_folds() -> usize {
    5
}

fn default_ci_level() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub alpha: f64,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    /// `None` picks [`DEFAULT_DISCRETE_NOISE`] when any mutable column is
    /// discrete and 0 otherwise. `Some(0.0)` disables the noise.
    #[serde(default)]
    pub discrete_noise_epsilon: Option<f64>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mean_learner: KernelRidgeLearner,
    #[serde(default)]
    pub quantile_learner: SplineQuantileLearner,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            k_folds: default_k_folds(),
            discrete_noise_epsilon: None,
            ci_level: default_ci_level(),
            seed: 0,
            mean_learner: KernelRidgeLearner::default(),
            quantile_learner: SplineQuantileLearner::default(),
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in [0, 1), got {alpha}")))
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.validate_shared()
    }

    /// Checks everything except `alpha`, which a risk curve overrides.
    pub fn validate_shared(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::Config("k_folds must be at least 2".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config(format!(
                "ci_level must lie in (0, 1), got {}",
                self.ci_level
            )));
        }
        if let Some(eps) = self.discrete_noise_epsilon {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!(
                    "discrete_noise_epsilon must be finite and non-negative, got {eps}"
                )));
            }
        }
        self.mean_learner.grid.validate()?;
        self.quantile_learner.grid.validate()?;
        if self.quantile_learner.basis.degree < 1 {
            return Err(Error::Config("spline degree must be at least 1".into()));
        }
        Ok(())
    }

    /// The noise scale actually used on `frame`.
    pub fn resolved_epsilon(&self, frame: &EvaluationFrame) -> f64 {
        self.discrete_noise_epsilon.unwrap_or(if frame.w_any_discrete() {
            DEFAULT_DISCRETE_NOISE
        } else {
            0.0
        })
    }
}

/// Per-fold hyperparameters and diagnostics of the nuisance fits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train_rows: usize,
    pub mean_hyperparameters: BTreeMap<String, f64>,
    pub quantile_hyperparameters: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorstCaseEstimate {
    pub alpha: f64,
    pub r_hat: f64,
    pub sigma2_hat: f64,
    pub ci_level: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n: usize,
    pub epsilon_used: f64,
    /// `h_i = [mu_i + u_i >= eta_i]`, one entry per row.
    #[serde(skip)]
    pub h_indicators: Vec<u8>,
    /// Cross-fitted nuisance values; empty when no nuisances were needed.
    #[serde(skip)]
    pub mu_hat: Vec<f64>,
    #[serde(skip)]
    pub eta_hat: Vec<f64>,
    #[serde(skip)]
    pub noise: Vec<f64>,
    /// Centered scores `phi_i - r_hat`.
    #[serde(skip)]
    pub psi_values: Vec<f64>,
    pub subsample_size: usize,
    pub folds: Vec<FoldSummary>,
    pub warnings: Vec<String>,
}

impl WorstCaseEstimate {
    pub fn ci(&self) -> (f64, f64) {
        (self.ci_lower, self.ci_upper)
    }

    pub fn ci_half_width(&self) -> f64 {
        0.5 * (self.ci_upper - self.ci_lower)
    }
}

/// A fitted `(mu_k, eta_k)` pair for one cross-fitting fold.
#[derive(Clone, Debug)]
pub struct NuisanceFit {
    pub fold_index: usize,
    pub mu_model: FittedLearner,
    pub eta_model: FittedLearner,
    /// Noise of the rows in the fold, in `in_fold` order; empty when epsilon is 0.
    pub noise_draws: Vec<f64>,
}

/// `sum_i w_i [ (mu_i - eta_i)_+ / (1 - alpha) + eta_i ]`.
pub fn dual_objective(mu: &[f64], eta: &[f64], weights: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    for len in [eta.len(), weights.len()] {
        if len != mu.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                actual: len,
            });
        }
    }
    Ok(mu
        .iter()
        .zip(eta)
        .zip(weights)
        .map(|((m, e), w)| w * ((m - e).max(0.0) / (1.0 - alpha) + e))
        .sum())
}

/// The orthogonal score `((mu - eta)_+ + [mu >= eta](loss - mu)) / (1 - alpha) + eta - r`.
pub fn score_psi(loss: f64, mu: f64, eta: f64, alpha: f64, r: f64) -> f64 {
    let h = if mu >= eta { 1.0 } else { 0.0 };
    ((mu - eta).max(0.0) + h * (loss - mu)) / (1.0 - alpha) + eta - r
}

/// Average over folds of the within-fold mean of `values`.
fn fold_average(values: &[f64], folds: &FoldAssignment) -> f64 {
    let k = folds.k_folds;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (v, &f) in values.iter().zip(&folds.fold_id) {
        sums[f] += v;
        counts[f] += 1;
    }
    let used: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect();
    used.iter().sum::<f64>() / used.len() as f64
}

/// Mean squared score, averaged per fold and then across folds.
pub fn estimate_variance(psi_values: &[f64], folds: &FoldAssignment) -> Result<f64> {
    if psi_values.is_empty() {
        return Err(Error::InsufficientData("no scores to average".into()));
    }
    if folds.n() != psi_values.len() {
        return Err(Error::DimensionMismatch {
            expected: psi_values.len(),
            actual: folds.n(),
        });
    }
    let squares: Vec<f64> = psi_values.iter().map(|p| p * p).collect();
    Ok(fold_average(&squares, folds))
}

/// Two-sided normal quantile `Phi^{-1}(1 - a/2)` for `ci_level = 1 - a`.
pub fn normal_critical_value(ci_level: f64) -> Result<f64> {
    if !(ci_level > 0.0 && ci_level < 1.0) {
        return Err(Error::Config(format!("ci_level must lie in (0, 1), got {ci_level}")));
    }
    let std = Normal::standard();
    Ok(std.inverse_cdf(0.5 + ci_level / 2.0))
}

pub fn confidence_interval(r_hat: f64, sigma2_hat: f64, n: usize, ci_level: f64) -> Result<(f64, f64)> {
    if sigma2_hat.is_nan() || sigma2_hat < 0.0 || n == 0 {
        return Err(Error::Domain(format!(
            "confidence interval needs sigma2 >= 0 and n >= 1 (got {sigma2_hat}, {n})"
        )));
    }
    let half = normal_critical_value(ci_level)? * (sigma2_hat / n as f64).sqrt();
    Ok((r_hat - half, r_hat + half))
}

/// Aggregates given cross-fitted nuisance values into an estimate.
///
/// `noise` may be empty (no noise) or hold one draw per row. The ramp and the
/// indicator use `mu + u`; the residual correction uses `loss - mu`.
pub fn estimate_with_nuisances(
    losses: &[f64],
    mu_hat: &[f64],
    eta_hat: &[f64],
    noise: &[f64],
    folds: &FoldAssignment,
    alpha: f64,
    ci_level: f64,
) -> Result<WorstCaseEstimate> {
    check_alpha(alpha)?;
    let n = losses.len();
    for len in [mu_hat.len(), eta_hat.len(), folds.n()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    if !noise.is_empty() && noise.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: noise.len(),
        });
    }
    if n == 0 {
        return Err(Error::InsufficientData("no rows to estimate on".into()));
    }
    let scale = 1.0 / (1.0 - alpha);
    let mut h = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    for i in 0..n {
        let m = mu_hat[i] + noise.get(i).copied().unwrap_or(0.0);
        let e = eta_hat[i];
        let inside = m >= e;
        h.push(u8::from(inside));
        let residual = if inside { losses[i] - mu_hat[i] } else { 0.0 };
        phi.push(scale * ((m - e).max(0.0) + residual) + e);
    }
    let r_hat = fold_average(&phi, folds);
    let psi: Vec<f64> = phi.iter().map(|p| p - r_hat).collect();
    let sigma2 = estimate_variance(&psi, folds)?;
    let (lo, hi) = confidence_interval(r_hat, sigma2, n, ci_level)?;
    let subsample_size = h.iter().map(|&v| v as usize).sum();
    Ok(WorstCaseEstimate {
        alpha,
        r_hat,
        sigma2_hat: sigma2,
        ci_level,
        ci_lower: lo,
        ci_upper: hi,
        n,
        epsilon_used: if noise.is_empty() {
            0.0
        } else {
            noise.iter().copied().fold(0.0, f64::max)
        },
        h_indicators: h,
        mu_hat: mu_hat.to_vec(),
        eta_hat: eta_hat.to_vec(),
        noise: noise.to_vec(),
        psi_values: psi,
        subsample_size,
        folds: Vec::new(),
        warnings: Vec::new(),
    })
}

/// The `alpha = 0` estimate: the plain mean with every row in the subsample.
fn mean_estimate(frame: &EvaluationFrame, ci_level: f64) -> Result<WorstCaseEstimate> {
    let n = frame.n();
    let r_hat = frame.losses.iter().sum::<f64>() / n as f64;
    let psi: Vec<f64> = frame.losses.iter().map(|l| l - r_hat).collect();
    let sigma2 = estimate_variance(&psi, &frame.folds)?;
    let (lo, hi) = confidence_interval(r_hat, sigma2, n, ci_level)?;
    Ok(WorstCaseEstimate {
        alpha: 0.0,
        r_hat,
        sigma2_hat: sigma2,
        ci_level,
        ci_lower: lo,
        ci_upper: hi,
        n,
        epsilon_used: 0.0,
        h_indicators: vec![1; n],
        mu_hat: Vec::new(),
        eta_hat: Vec::new(),
        noise: Vec::new(),
        psi_values: psi,
        subsample_size: n,
        folds: Vec::new(),
        warnings: Vec::new(),
    })
}

/// Seed of the learners for fold `k`.
fn fold_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

/// Noise for every row from a stream independent of the fold shuffle.
pub fn draw_noise(n: usize, epsilon: f64, seed: u64) -> Vec<f64> {
    if epsilon == 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..n).map(|_| rng.gen::<f64>() * epsilon).collect()
}

struct MeanFold {
    model: FittedLearner,
    /// Predictions on out-of-fold rows, in `out_of_fold` order.
    train_pred: Vec<f64>,
    /// Predictions on in-fold rows, in `in_fold` order.
    test_pred: Vec<f64>,
}

fn check_frame(frame: &EvaluationFrame, config: &EstimatorConfig) -> Result<()> {
    config.validate_shared()?;
    frame.validate()?;
    if frame.k_folds() != config.k_folds {
        return Err(Error::Config(format!(
            "frame has {} folds but the estimator is configured for {}",
            frame.k_folds(),
            config.k_folds
        )));
    }
    let n = frame.n();
    if n < 2 * frame.k_folds() {
        return Err(Error::InsufficientData(format!(
            "need at least {} rows for {} folds, got {n}",
            2 * frame.k_folds(),
            frame.k_folds()
        )));
    }
    if frame.folds.fold_sizes().iter().any(|&s| s == 0 || s == n) {
        return Err(Error::InsufficientData("a fold leaves an empty training or evaluation split".into()));
    }
    Ok(())
}

fn fit_mean_folds(
    frame: &EvaluationFrame,
    learner: &dyn MeanLearner,
    seed: u64,
) -> Result<Vec<MeanFold>> {
    let x = frame.features();
    (0..frame.k_folds())
        .into_par_iter()
        .map(|k| {
            let train = frame.folds.out_of_fold(k);
            let test = frame.folds.in_fold(k);
            let xt = x.select_rows(train.iter());
            let yt: Vec<f64> = train.iter().map(|&i| frame.losses[i]).collect();
            let model = learner.fit(&xt, &yt, fold_seed(seed, k))?;
            let train_pred = model.predict(&xt)?;
            let test_pred = model.predict(&x.select_rows(test.iter()))?;
            Ok(MeanFold {
                model,
                train_pred,
                test_pred,
            })
        })
        .collect()
}

fn z_names(frame: &EvaluationFrame) -> Vec<String> {
    frame.z_columns.iter().map(|c| c.name.clone()).collect()
}

fn push_unique(warnings: &mut Vec<String>, w: String) {
    if !warnings.contains(&w) {
        warnings.push(w);
    }
}

/// Fits the quantile nuisance for each fold at `alpha` and aggregates.
fn estimate_from_mean_folds(
    frame: &EvaluationFrame,
    config: &EstimatorConfig,
    quantile: &dyn QuantileLearner,
    mean_folds: &[MeanFold],
    alpha: f64,
    epsilon: f64,
    noise: &[f64],
) -> Result<(WorstCaseEstimate, Vec<NuisanceFit>)> {
    let names = z_names(frame);
    let eta_folds: Vec<(FittedLearner, Vec<f64>)> = (0..frame.k_folds())
        .into_par_iter()
        .map(|k| {
            let train = frame.folds.out_of_fold(k);
            let test = frame.folds.in_fold(k);
            let targets: Vec<f64> = train
                .iter()
                .zip(&mean_folds[k].train_pred)
                .map(|(&i, m)| m + noise.get(i).copied().unwrap_or(0.0))
                .collect();
            let zt = frame.z_block.select_rows(train.iter());
            let model = quantile.fit(&zt, &names, &targets, alpha, fold_seed(config.seed, k))?;
            let pred = model.predict(&frame.z_block.select_rows(test.iter()))?;
            Ok((model, pred))
        })
        .collect::<Result<_>>()?;

    let n = frame.n();
    let mut mu_hat = vec![0.0; n];
    let mut eta_hat = vec![0.0; n];
    let mut warnings = Vec::new();
    let mut summaries = Vec::new();
    let mut fits = Vec::new();
    for (k, (mf, (eta_model, eta_pred))) in mean_folds.iter().zip(eta_folds).enumerate() {
        let test = frame.folds.in_fold(k);
        for (j, &i) in test.iter().enumerate() {
            mu_hat[i] = mf.test_pred[j];
            eta_hat[i] = eta_pred[j];
        }
        if epsilon == 0.0 {
            let first = mf.train_pred[0];
            if mf.train_pred.iter().all(|&v| v == first) {
                push_unique(
                    &mut warnings,
                    format!("degenerate quantile: the mean fit for fold {k} is constant and no noise is added"),
                );
            }
        }
        for w in mf.model.warnings.iter().chain(&eta_model.warnings) {
            push_unique(&mut warnings, w.clone());
        }
        summaries.push(FoldSummary {
            fold: k,
            train_rows: n - test.len(),
            mean_hyperparameters: mf.model.hyperparameters.clone(),
            quantile_hyperparameters: eta_model.hyperparameters.clone(),
        });
        fits.push(NuisanceFit {
            fold_index: k,
            mu_model: mf.model.clone(),
            eta_model,
            noise_draws: if noise.is_empty() {
                Vec::new()
            } else {
                test.iter().map(|&i| noise[i]).collect()
            },
        });
    }

    let mut est = estimate_with_nuisances(
        &frame.losses,
        &mu_hat,
        &eta_hat,
        noise,
        &frame.folds,
        alpha,
        config.ci_level,
    )?;
    est.epsilon_used = epsilon;
    est.folds = summaries;
    est.warnings = warnings;
    Ok((est, fits))
}

fn discrete_warning(frame: &EvaluationFrame, epsilon: f64) -> Option<String> {
    (epsilon == 0.0 && frame.w_all_discrete()).then(|| {
        "every mutable column is discrete but no noise is added; conditional quantiles of the mean fit may not be unique".to_string()
    })
}

fn emit_warnings(est: &WorstCaseEstimate) {
    for w in &est.warnings {
        log::warn!("alpha {}: {w}", est.alpha);
    }
}

/// Cross-fitted estimate with the reference learners from `config`.
pub fn estimate_worst_case(frame: &EvaluationFrame, config: &EstimatorConfig) -> Result<WorstCaseEstimate> {
    estimate_worst_case_with(frame, config, &config.mean_learner, &config.quantile_learner)
        .map(|(est, _)| est)
}

/// Cross-fitted estimate with user-supplied learners; also returns the per-fold fits.
pub fn estimate_worst_case_with(
    frame: &EvaluationFrame,
    config: &EstimatorConfig,
    mean: &dyn MeanLearner,
    quantile: &dyn QuantileLearner,
) -> Result<(WorstCaseEstimate, Vec<NuisanceFit>)> {
    config.validate()?;
    check_frame(frame, config)?;
    if config.alpha == 0.0 {
        return Ok((mean_estimate(frame, config.ci_level)?, Vec::new()));
    }
    let epsilon = config.resolved_epsilon(frame);
    let noise = draw_noise(frame.n(), epsilon, config.seed);
    let mean_folds = fit_mean_folds(frame, mean, config.seed)?;
    let (mut est, fits) =
        estimate_from_mean_folds(frame, config, quantile, &mean_folds, config.alpha, epsilon, &noise)?;
    if let Some(w) = discrete_warning(frame, epsilon) {
        est.warnings.insert(0, w);
    }
    emit_warnings(&est);
    Ok((est, fits))
}

/// Estimates over an increasing grid of `alpha`, sharing folds, noise and the
/// mean fits across grid points; the quantile nuisance is refit per `alpha`.
pub fn risk_curve(
    frame: &EvaluationFrame,
    alpha_grid: &[f64],
    config: &EstimatorConfig,
) -> Result<Vec<WorstCaseEstimate>> {
    risk_curve_with(frame, alpha_grid, config, &config.mean_learner, &config.quantile_learner)
}

pub fn validate_alpha_grid(alpha_grid: &[f64]) -> Result<()> {
    if alpha_grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    for &a in alpha_grid {
        check_alpha(a)?;
    }
    if alpha_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("alpha grid must be strictly increasing".into()));
    }
    Ok(())
}

pub fn risk_curve_with(
    frame: &EvaluationFrame,
    alpha_grid: &[f64],
    config: &EstimatorConfig,
    mean: &dyn MeanLearner,
    quantile: &dyn QuantileLearner,
) -> Result<Vec<WorstCaseEstimate>> {
    validate_alpha_grid(alpha_grid)?;
    check_frame(frame, config)?;
    let epsilon = config.resolved_epsilon(frame);
    let noise = draw_noise(frame.n(), epsilon, config.seed);
    let mean_folds = if alpha_grid.iter().any(|&a| a > 0.0) {
        Some(fit_mean_folds(frame, mean, config.seed)?)
    } else {
        None
    };
    let warning = discrete_warning(frame, epsilon);
    alpha_grid
        .iter()
        .map(|&alpha| {
            let mut est = match &mean_folds {
                Some(mf) if alpha > 0.0 => {
                    let mut est = estimate_from_mean_folds(
                        frame, config, quantile, mf, alpha, epsilon, &noise,
                    )?
                    .0;
                    if let Some(w) = &warning {
                        est.warnings.insert(0, w.clone());
                    }
                    est
                }
                _ => mean_estimate(frame, config.ci_level)?,
            };
            est.alpha = alpha;
            emit_warnings(&est);
            Ok(est)
        })
        .collect()
}
