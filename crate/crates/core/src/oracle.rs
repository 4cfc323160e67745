//! Exact worst-case risk on discrete `(W, Z)` instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::check_alpha;

/// How observed losses scatter around the cell means when sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossNoise {
    /// Bernoulli when every cell mean lies in `[0, 1]`, otherwise normal with sd 0.1.
    #[default]
    Auto,
    Bernoulli,
    Normal { sd: f64 },
    /// Losses equal the cell mean exactly.
    PointMass,
}

/// A finite joint law of `(W, Z)` with the true conditional expected loss per cell.
/// Tables are indexed `[w][z]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    pub w_levels: Vec<i64>,
    pub z_levels: Vec<i64>,
    pub joint_pmf: Vec<Vec<f64>>,
    pub mu_table: Vec<Vec<f64>>,
    #[serde(default)]
    pub loss_noise: LossNoise,
}

impl DiscreteInstance {
    pub fn new(
        w_levels: Vec<i64>,
        z_levels: Vec<i64>,
        joint_pmf: Vec<Vec<f64>>,
        mu_table: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let inst = Self {
            w_levels,
            z_levels,
            joint_pmf,
            mu_table,
            loss_noise: LossNoise::Auto,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn n_w(&self) -> usize {
        self.w_levels.len()
    }

    pub fn n_z(&self) -> usize {
        self.z_levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (nw, nz) = (self.n_w(), self.n_z());
        if nw == 0 || nz == 0 {
            return Err(Error::Config("an instance needs at least one W and one Z level".into()));
        }
        for table in [&self.joint_pmf, &self.mu_table] {
            if table.len() != nw || table.iter().any(|r| r.len() != nz) {
                return Err(Error::Config(format!("instance tables must be {nw} x {nz}")));
            }
        }
        if self.joint_pmf.iter().flatten().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("probabilities must be finite and non-negative".into()));
        }
        if self.mu_table.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::Config("cell means must be finite".into()));
        }
        let total: f64 = self.joint_pmf.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("joint pmf sums to {total}, not 1")));
        }
        if self.z_marginal().iter().any(|&p| p <= 0.0) {
            return Err(Error::Config("every Z level needs positive mass".into()));
        }
        if let LossNoise::Normal { sd } = self.loss_noise {
            if !(sd.is_finite() && sd >= 0.0) {
                return Err(Error::Config("normal loss noise needs a finite sd >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn z_marginal(&self) -> Vec<f64> {
        (0..self.n_z())
            .map(|z| (0..self.n_w()).map(|w| self.joint_pmf[w][z]).sum())
            .collect()
    }

    /// `P(W = w | Z = z)` for every `w`.
    pub fn conditional(&self, z: usize) -> Vec<f64> {
        let pz = self.z_marginal()[z];
        (0..self.n_w()).map(|w| self.joint_pmf[w][z] / pz).collect()
    }

    pub fn mean_loss(&self) -> f64 {
        self.joint_pmf
            .iter()
            .flatten()
            .zip(self.mu_table.iter().flatten())
            .map(|(p, m)| p * m)
            .sum()
    }

    /// The same law with `Z` folded into `W`: one `Z` level and a `W` level per
    /// `(w, z)` cell, so the conditional constraint no longer binds.
    pub fn merge_z_into_w(&self) -> Self {
        let mut w_levels = Vec::new();
        let mut pmf = Vec::new();
        let mut mu = Vec::new();
        for w in 0..self.n_w() {
            for z in 0..self.n_z() {
                w_levels.push((w * self.n_z() + z) as i64);
                pmf.push(vec![self.joint_pmf[w][z]]);
                mu.push(vec![self.mu_table[w][z]]);
            }
        }
        Self {
            w_levels,
            z_levels: vec![0],
            joint_pmf: pmf,
            mu_table: mu,
            loss_noise: self.loss_noise,
        }
    }
}

/// Optimal fractional membership `h[w][z]` in `[0, 1]`: per `Z` level, cells
/// are taken in decreasing order of mean until conditional mass `1 - alpha`.
pub fn worst_case_selection(instance: &DiscreteInstance, alpha: f64) -> Result<Vec<Vec<f64>>> {
    check_alpha(alpha)?;
    instance.validate()?;
    let mut h = vec![vec![0.0; instance.n_z()]; instance.n_w()];
    for z in 0..instance.n_z() {
        let cond = instance.conditional(z);
        let mut order: Vec<usize> = (0..instance.n_w()).collect();
        order.sort_by(|&a, &b| instance.mu_table[b][z].total_cmp(&instance.mu_table[a][z]));
        let mut remaining = 1.0 - alpha;
        for w in order {
            if remaining <= 0.0 {
                break;
            }
            if cond[w] <= 0.0 {
                continue;
            }
            let take = cond[w].min(remaining);
            h[w][z] = take / cond[w];
            remaining -= take;
        }
    }
    Ok(h)
}

/// Exact primal optimum: `sup_h E[h mu] / (1 - alpha)` subject to `E[h | Z] = 1 - alpha`.
pub fn exact_worst_case_discrete(instance: &DiscreteInstance, alpha: f64) -> Result<f64> {
    let h = worst_case_selection(instance, alpha)?;
    let mut total = 0.0;
    for (w, row) in h.iter().enumerate() {
        for (z, hv) in row.iter().enumerate() {
            total += hv * instance.joint_pmf[w][z] * instance.mu_table[w][z];
        }
    }
    Ok(total / (1.0 - alpha))
}

/// The inner dual objective for one `Z` level at threshold `eta`.
fn dual_inner(mu: &[f64], cond: &[f64], alpha: f64, eta: f64) -> f64 {
    mu.iter()
        .zip(cond)
        .map(|(m, p)| p * (m - eta).max(0.0))
        .sum::<f64>()
        / (1.0 - alpha)
        + eta
}

/// Returns `(primal, dual)`; the dual minimizes the piecewise-linear inner
/// objective over its breakpoints (the cell means) separately per `Z` level.
pub fn exact_dual_check(instance: &DiscreteInstance, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("the dual check needs alpha in (0, 1), got {alpha}")));
    }
    let primal = exact_worst_case_discrete(instance, alpha)?;
    let pz = instance.z_marginal();
    let mut dual = 0.0;
    for (z, &p) in pz.iter().enumerate() {
        let cond = instance.conditional(z);
        let mu: Vec<f64> = (0..instance.n_w()).map(|w| instance.mu_table[w][z]).collect();
        let best = mu
            .iter()
            .map(|&eta| dual_inner(&mu, &cond, alpha, eta))
            .fold(f64::INFINITY, f64::min);
        dual += p * best;
    }
    Ok((primal, dual))
}

/// Lower `alpha`-quantile of the conditional law of `mu` given each `Z` level:
/// the exact threshold nuisance without noise.
pub fn exact_thresholds(instance: &DiscreteInstance, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    instance.validate()?;
    Ok((0..instance.n_z())
        .map(|z| {
            let cond = instance.conditional(z);
            let mut order: Vec<usize> = (0..instance.n_w()).filter(|&w| cond[w] > 0.0).collect();
            order.sort_by(|&a, &b| instance.mu_table[a][z].total_cmp(&instance.mu_table[b][z]));
            let mut cdf = 0.0;
            for &w in &order {
                cdf += cond[w];
                // absorb rounding so a cut exactly on a cell boundary stays there
                if cdf >= alpha - 1e-15 {
                    return instance.mu_table[w][z];
                }
            }
            instance.mu_table[*order.last().expect("positive mass")][z]
        })
        .collect())
}

/// `E[(M - q)_+]` for `M ~ Unif(a, a + eps)`.
fn uniform_excess(a: f64, eps: f64, q: f64) -> f64 {
    if q <= a {
        a + 0.5 * eps - q
    } else if q >= a + eps {
        0.0
    } else {
        let d = a + eps - q;
        d * d / (2.0 * eps)
    }
}

/// `alpha`-quantile of the mixture `mu(W, z) + U` with `U ~ Unif(0, eps)`,
/// whose CDF is piecewise linear between the block endpoints.
fn mixture_quantile(mu: &[f64], cond: &[f64], eps: f64, alpha: f64) -> f64 {
    let cdf = |x: f64| -> f64 {
        mu.iter()
            .zip(cond)
            .map(|(m, p)| p * ((x - m) / eps).clamp(0.0, 1.0))
            .sum()
    };
    let mut points: Vec<f64> = mu
        .iter()
        .zip(cond)
        .filter(|(_, p)| **p > 0.0)
        .flat_map(|(m, _)| [*m, m + eps])
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut prev = points[0];
    let mut f_prev = 0.0;
    for &b in &points[1..] {
        let f_b = cdf(b);
        // the tolerance keeps rounding in the CDF from skipping past a flat stretch
        if f_b >= alpha - 1e-14 {
            if alpha - f_prev <= 1e-14 {
                return prev;
            }
            return (prev + (alpha - f_prev) / (f_b - f_prev) * (b - prev)).min(b);
        }
        prev = b;
        f_prev = f_b;
    }
    prev
}

/// Per-`Z` thresholds of the noisy problem: the `alpha`-quantile of `mu + U`.
pub fn noisy_thresholds(instance: &DiscreteInstance, alpha: f64, epsilon: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return exact_thresholds(instance, alpha);
    }
    instance.validate()?;
    Ok((0..instance.n_z())
        .map(|z| {
            let cond = instance.conditional(z);
            let mu: Vec<f64> = (0..instance.n_w()).map(|w| instance.mu_table[w][z]).collect();
            mixture_quantile(&mu, &cond, epsilon, alpha)
        })
        .collect())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon >= 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("epsilon must be finite and non-negative, got {epsilon}")))
    }
}

/// Exact worst-case risk when the selection sees `mu + U`, `U ~ Unif(0, eps)`
/// independent of everything else; each cell is a uniform block of its mass.
pub fn exact_noisy_worst_case(instance: &DiscreteInstance, alpha: f64, epsilon: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return exact_worst_case_discrete(instance, alpha);
    }
    let thresholds = noisy_thresholds(instance, alpha, epsilon)?;
    let pz = instance.z_marginal();
    let mut total = 0.0;
    for (z, (&p, &q)) in pz.iter().zip(&thresholds).enumerate() {
        let cond = instance.conditional(z);
        let excess: f64 = (0..instance.n_w())
            .map(|w| cond[w] * uniform_excess(instance.mu_table[w][z], epsilon, q))
            .sum();
        total += p * (excess / (1.0 - alpha) + q);
    }
    Ok(total)
}

/// A seeded instance with at most `max_cells` joint levels, at least two `W`
/// levels and cell means in `[0, 1]`.
pub fn random_instance(seed: u64, max_cells: usize) -> DiscreteInstance {
    let max_cells = max_cells.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_z = rng.gen_range(1..=(max_cells / 2).max(1));
    let n_w = rng.gen_range(2..=(max_cells / n_z).max(2));
    let mut pmf: Vec<Vec<f64>> = (0..n_w)
        .map(|_| (0..n_z).map(|_| rng.gen_range(0.05..1.0)).collect())
        .collect();
    let total: f64 = pmf.iter().flatten().sum();
    for v in pmf.iter_mut().flatten() {
        *v /= total;
    }
    // renormalize so the total is 1 to rounding before validation
    let total: f64 = pmf.iter().flatten().sum();
    pmf[0][0] += 1.0 - total;
    let mu: Vec<Vec<f64>> = (0..n_w)
        .map(|_| (0..n_z).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    DiscreteInstance {
        w_levels: (0..n_w as i64).collect(),
        z_levels: (0..n_z as i64).collect(),
        joint_pmf: pmf,
        mu_table: mu,
        loss_noise: LossNoise::Auto,
    }
}

/// Divergence radius equivalent to subpopulation proportion `1 - alpha`.
pub fn rho_from_alpha(alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    Ok(-(-alpha).ln_1p())
}

pub fn alpha_from_rho(rho: f64) -> Result<f64> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::Domain(format!("rho must be finite and non-negative, got {rho}")));
    }
    Ok(-(-rho).exp_m1())
}
