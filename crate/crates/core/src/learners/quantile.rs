//! Ridge-penalized linear quantile regression.
//!
//! Minimizes `sum_i rho_a(y_i - d_i . b) + lambda * |b[1..]|^2`, where
//! `rho_a(u) = u (a - [u < 0])` is the pinball loss and `b[0]` is the
//! unpenalized intercept. The pinball loss is replaced by a Huber-smoothed
//! surrogate whose smoothing width shrinks geometrically; each width is solved
//! by damped Newton steps warm-started from the previous width. A final exact
//! pass re-solves the intercept as an order statistic of the partial residuals,
//! which resolves a flat optimum to its left endpoint.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::learners::spline::FittedBasis;

/// Pinball (check) loss.
#[inline]
pub fn pinball(u: f64, alpha: f64) -> f64 {
    if u < 0.0 {
        u * (alpha - 1.0)
    } else {
        u * alpha
    }
}

/// Regularized objective with an unpenalized first coefficient.
pub fn pinball_objective(
    design: &DMatrix<f64>,
    targets: &[f64],
    coefficients: &[f64],
    alpha: f64,
    lambda: f64,
) -> f64 {
    let fit = design * DVector::from_column_slice(coefficients);
    let loss: f64 = targets
        .iter()
        .zip(fit.iter())
        .map(|(y, f)| pinball(y - f, alpha))
        .sum();
    let penalty: f64 = coefficients.iter().skip(1).map(|b| b * b).sum();
    loss + lambda * penalty
}

/// Lower empirical quantile: the `max(1, ceil(n a))`-th smallest value.
pub fn lower_quantile(values: &[f64], alpha: f64) -> f64 {
    let mut sorted = values.to_vec();
    let n = sorted.len();
    let k = ((n as f64 * alpha) - 1e-12).ceil().max(1.0) as usize;
    let k = k.min(n);
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantileFitOptions {
    pub max_iterations: usize,
    /// Relative objective tolerance of the final smoothing level.
    pub tolerance: f64,
}

impl Default for QuantileFitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearQuantileFit {
    pub coefficients: Vec<f64>,
    pub quantile_level: f64,
    pub ridge_lambda: f64,
    pub objective: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out; the best iterate is returned.
    pub converged: bool,
}

/// A quantile regressor over a spline basis of the immutable columns.
#[derive(Clone, Debug, Serialize)]
pub struct QuantileModel {
    pub basis: FittedBasis,
    pub fit: LinearQuantileFit,
}

impl QuantileModel {
    pub fn coefficients(&self) -> &[f64] {
        &self.fit.coefficients
    }

    pub fn predict(&self, z_block: &DMatrix<f64>) -> Result<Vec<f64>> {
        predict_quantile(self, z_block)
    }
}

pub fn predict_quantile(model: &QuantileModel, z_block: &DMatrix<f64>) -> Result<Vec<f64>> {
    let design = model.basis.design(z_block)?;
    let beta = DVector::from_column_slice(&model.fit.coefficients);
    Ok((design * beta).iter().copied().collect())
}

/// Smoothed pinball: `(a - 1/2) u + H_d(u) / 2` with the Huber function `H_d`.
struct Smoothed<'a> {
    design: &'a DMatrix<f64>,
    targets: &'a [f64],
    alpha: f64,
    lambda: f64,
}

impl Smoothed<'_> {
    fn residuals(&self, beta: &DVector<f64>) -> Vec<f64> {
        let fit = self.design * beta;
        self.targets.iter().zip(fit.iter()).map(|(y, f)| y - f).collect()
    }

    fn value(&self, beta: &DVector<f64>, delta: f64) -> f64 {
        let a = self.alpha - 0.5;
        let loss: f64 = self
            .residuals(beta)
            .into_iter()
            .map(|u| {
                let h = if u.abs() <= delta {
                    u * u / (2.0 * delta) + delta / 2.0
                } else {
                    u.abs()
                };
                a * u + 0.5 * h
            })
            .sum();
        loss + self.penalty(beta)
    }

    fn penalty(&self, beta: &DVector<f64>) -> f64 {
        self.lambda * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
    }

    fn gradient_hessian(&self, beta: &DVector<f64>, delta: f64) -> (DVector<f64>, DMatrix<f64>) {
        let p = beta.len();
        let r = self.residuals(beta);
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        let a = self.alpha - 0.5;
        for (i, &u) in r.iter().enumerate() {
            let row = self.design.row(i);
            let in_band = u.abs() <= delta;
            let dpsi = if in_band { a + 0.5 * u / delta } else { a + 0.5 * u.signum() };
            for j in 0..p {
                grad[j] -= dpsi * row[j];
            }
            if in_band {
                let w = 0.5 / delta;
                for j in 0..p {
                    let rj = row[j] * w;
                    if rj == 0.0 {
                        continue;
                    }
                    for k in 0..=j {
                        hess[(j, k)] += rj * row[k];
                    }
                }
            }
        }
        for j in 1..p {
            grad[j] += 2.0 * self.lambda * beta[j];
            hess[(j, j)] += 2.0 * self.lambda;
        }
        for j in 0..p {
            for k in 0..j {
                hess[(k, j)] = hess[(j, k)];
            }
        }
        (grad, hess)
    }
}

fn damped_solve(hess: &DMatrix<f64>, grad: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
    let mut h = hess.clone();
    for d in 0..grad.len() {
        h[(d, d)] += mu;
    }
    let step = -h.cholesky()?.solve(grad);
    step.iter().all(|v| v.is_finite()).then_some(step)
}

fn check_design(design: &DMatrix<f64>, targets: &[f64], alpha: f64, lambda: f64) -> Result<()> {
    if design.nrows() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: design.nrows(),
            actual: targets.len(),
        });
    }
    if targets.is_empty() || design.ncols() == 0 {
        return Err(Error::InsufficientData("quantile regression needs rows and an intercept".into()));
    }
    if design.column(0).iter().any(|&v| v != 1.0) {
        return Err(Error::Config("first design column must be the all-ones intercept".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("quantile level must lie in [0, 1), got {alpha}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Domain("quantile targets must be finite".into()));
    }
    Ok(())
}

pub fn fit_quantile_regression(
    design: &DMatrix<f64>,
    targets: &[f64],
    alpha: f64,
    lambda: f64,
) -> Result<LinearQuantileFit> {
    fit_quantile_regression_with(design, targets, alpha, lambda, &QuantileFitOptions::default())
}

pub fn fit_quantile_regression_with(
    design: &DMatrix<f64>,
    targets: &[f64],
    alpha: f64,
    lambda: f64,
    options: &QuantileFitOptions,
) -> Result<LinearQuantileFit> {
    check_design(design, targets, alpha, lambda)?;
    let p = design.ncols();
    let problem = Smoothed {
        design,
        targets,
        alpha,
        lambda,
    };

    let mut beta = DVector::zeros(p);
    beta[0] = lower_quantile(targets, alpha);

    let spread = targets.iter().map(|t| (t - beta[0]).abs()).fold(0.0, f64::max);
    let magnitude = targets.iter().map(|t| t.abs()).fold(0.0, f64::max);
    let mut iterations = 0;
    let mut converged = true;

    if spread > 0.0 {
        let floor = 1e-13 * magnitude.max(spread);
        let col_scale = design.iter().map(|v| v * v).sum::<f64>() / p as f64;
        let mut delta = spread;
        'levels: loop {
            // Levenberg damping: shrink after a successful step, grow after a failed one
            let mu_max = 1e12 * col_scale / delta + 1.0;
            let mut mu = 1e-10 * col_scale / delta;
            let mut value = problem.value(&beta, delta);
            let (mut grad, mut hess) = problem.gradient_hessian(&beta, delta);
            let mut stalls = 0;
            loop {
                if iterations >= options.max_iterations {
                    converged = false;
                    break 'levels;
                }
                iterations += 1;
                let accepted = damped_solve(&hess, &grad, mu).and_then(|step| {
                    let slope = grad.dot(&step);
                    if slope >= 0.0 {
                        return None;
                    }
                    let cand = &beta + &step;
                    let v = problem.value(&cand, delta);
                    (v <= value + 1e-4 * slope).then_some((cand, v))
                });
                match accepted {
                    Some((cand, v)) => {
                        let drop = value - v;
                        beta = cand;
                        value = v;
                        mu = (mu * 0.1).max(1e-300);
                        (grad, hess) = problem.gradient_hessian(&beta, delta);
                        if drop <= 1e-15 * (1.0 + value.abs()) {
                            stalls += 1;
                            if stalls >= 2 {
                                break;
                            }
                        } else {
                            stalls = 0;
                        }
                    }
                    None => {
                        mu *= 10.0;
                        if mu > mu_max {
                            break;
                        }
                    }
                }
            }
            if delta <= floor {
                break;
            }
            delta = (delta * 0.1).max(floor);
        }
    }

    // exact intercept given the remaining coefficients
    let partial: Vec<f64> = {
        let mut b = beta.clone();
        b[0] = 0.0;
        problem.residuals(&b)
    };
    beta[0] = lower_quantile(&partial, alpha);

    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let objective = pinball_objective(design, targets, &coefficients, alpha, lambda);
    if !converged {
        log::warn!("quantile regression hit {} iterations; returning best iterate", options.max_iterations);
    }
    Ok(LinearQuantileFit {
        coefficients,
        quantile_level: alpha,
        ridge_lambda: lambda,
        objective,
        iterations,
        converged,
    })
}
