//! RBF kernel ridge regression for the conditional expected loss.
//!
//! Features are standardized per column before the kernel is evaluated. Rows
//! with identical feature vectors are collapsed into one support point carrying
//! its row count and target sum; for duplicated rows this gives the same
//! predictor as solving `(K + lambda*n*I) a = y` over all rows, at the cost of
//! an `m x m` solve where `m` is the number of distinct rows. When `m` exceeds
//! [`KernelRidgeOptions::max_exact_support`] the fit switches to a Nystrom
//! approximation on a seeded subset of the distinct rows.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Column means and population standard deviations; constant columns get scale 1.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(m);
            scale.push(if sd > 1e-12 * (1.0 + m.abs()) { sd } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.scale[j]
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct KernelRidgeOptions {
    /// Largest number of distinct rows solved exactly.
    pub max_exact_support: usize,
    /// Landmark count for the Nystrom path.
    pub landmarks: usize,
    pub seed: u64,
}

impl Default for KernelRidgeOptions {
    fn default() -> Self {
        Self {
            max_exact_support: 2000,
            landmarks: 400,
            seed: 0,
        }
    }
}

/// A fitted kernel ridge regressor: `f(x) = sum_j w_j exp(-gamma |s(x) - p_j|^2)`
/// where `s` is the stored standardization and `p_j` the support points.
#[derive(Clone, Debug, Serialize)]
pub struct KernelRidgeModel {
    #[serde(skip)]
    pub support_points: DMatrix<f64>,
    pub dual_weights: Vec<f64>,
    pub bandwidth_gamma: f64,
    pub ridge_lambda: f64,
    pub standardization: Standardization,
    pub nystrom: bool,
}

#[inline]
pub(crate) fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

fn row_vec(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..x.ncols()).map(|j| x[(i, j)]).collect()
}

/// Distinct rows of a (standardized) feature matrix and the group of every row.
#[derive(Clone, Debug)]
pub(crate) struct GroupedRows {
    pub points: Vec<Vec<f64>>,
    pub group_of: Vec<usize>,
}

impl GroupedRows {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut points = Vec::new();
        let mut group_of = Vec::with_capacity(x.nrows());
        for i in 0..x.nrows() {
            // +0.0 folds -0.0 into 0.0
            let row = row_vec(x, i);
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            let g = *index.entry(key).or_insert_with(|| {
                points.push(row);
                points.len() - 1
            });
            group_of.push(g);
        }
        Self { points, group_of }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Kernel matrix between all distinct points.
    pub fn gram(&self, gamma: f64) -> DMatrix<f64> {
        let m = self.len();
        let mut k = DMatrix::zeros(m, m);
        for a in 0..m {
            k[(a, a)] = 1.0;
            for b in 0..a {
                let v = rbf(&self.points[a], &self.points[b], gamma);
                k[(a, b)] = v;
                k[(b, a)] = v;
            }
        }
        k
    }

    /// Per-group row counts and target sums over the selected rows.
    pub fn accumulate(&self, rows: &[usize], targets: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut counts = vec![0.0; self.len()];
        let mut sums = vec![0.0; self.len()];
        for &i in rows {
            let g = self.group_of[i];
            counts[g] += 1.0;
            sums[g] += targets[i];
        }
        (counts, sums)
    }
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::SingularSystem(format!("{what}: matrix is singular")))?,
    };
    if sol.iter().all(|v| v.is_finite()) {
        Ok(sol)
    } else {
        Err(Error::SingularSystem(format!("{what}: non-finite solution")))
    }
}

/// Exact grouped solve: minimizes `sum_g c_g (ybar_g - f(p_g))^2 + lambda*n*|f|^2`
/// over the groups with `c_g > 0`. Returns the weights of those groups.
pub(crate) fn solve_exact(
    gram: &DMatrix<f64>,
    active: &[usize],
    counts: &[f64],
    sums: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    let n: f64 = active.iter().map(|&g| counts[g]).sum();
    let m = active.len();
    let mut a = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    for (r, &g) in active.iter().enumerate() {
        for (c, &h) in active.iter().enumerate() {
            a[(r, c)] = gram[(g, h)];
        }
        a[(r, r)] += lambda * n / counts[g];
        rhs[r] = sums[g] / counts[g];
    }
    let sol = solve_spd(a, rhs, "kernel ridge")?;
    if lambda == 0.0 {
        // interpolation must actually reproduce the group means
        let resid = active.iter().map(|&g| {
            let f: f64 = active
                .iter()
                .enumerate()
                .map(|(c, &h)| gram[(g, h)] * sol[c])
                .sum();
            (f - sums[g] / counts[g]).abs()
        });
        let scale = 1.0 + active.iter().map(|&g| (sums[g] / counts[g]).abs()).fold(0.0, f64::max);
        if resid.fold(0.0, f64::max) > 1e-6 * scale {
            return Err(Error::SingularSystem(
                "kernel matrix is numerically singular with lambda = 0".into(),
            ));
        }
    }
    Ok(sol.iter().copied().collect())
}

/// Nystrom solve with landmark weights `b`:
/// `(K_lg C K_gl + lambda*n*K_ll) b = K_lg C ybar`.
pub(crate) fn solve_nystrom(
    k_gl: &DMatrix<f64>,
    k_ll: &DMatrix<f64>,
    counts: &[f64],
    sums: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    let n: f64 = counts.iter().sum();
    let (m_g, m_l) = k_gl.shape();
    let mut weighted = k_gl.clone();
    let mut rhs = DVector::zeros(m_l);
    for g in 0..m_g {
        let c = counts[g];
        let s = sums[g];
        for l in 0..m_l {
            rhs[l] += k_gl[(g, l)] * s;
        }
        weighted.row_mut(g).scale_mut(c);
    }
    let mut a = k_gl.transpose() * weighted;
    a += k_ll * (lambda * n);
    let jitter = 1e-10 * (a.trace() / m_l as f64).max(1e-300);
    for d in 0..m_l {
        a[(d, d)] += jitter;
    }
    let sol = solve_spd(a, rhs, "nystrom kernel ridge")?;
    Ok(sol.iter().copied().collect())
}

fn check_inputs(features: &DMatrix<f64>, targets: &[f64], gamma: f64, lambda: f64) -> Result<()> {
    if features.nrows() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            actual: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::InsufficientData("kernel ridge needs at least one row".into()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

pub fn fit_kernel_ridge(
    features: &DMatrix<f64>,
    targets: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<KernelRidgeModel> {
    fit_kernel_ridge_with(features, targets, gamma, lambda, &KernelRidgeOptions::default())
}

pub fn fit_kernel_ridge_with(
    features: &DMatrix<f64>,
    targets: &[f64],
    gamma: f64,
    lambda: f64,
    options: &KernelRidgeOptions,
) -> Result<KernelRidgeModel> {
    check_inputs(features, targets, gamma, lambda)?;
    let standardization = Standardization::fit(features);
    let groups = GroupedRows::new(&standardization.apply(features));
    let all: Vec<usize> = (0..targets.len()).collect();
    let (counts, sums) = groups.accumulate(&all, targets);
    fit_grouped(&groups, &counts, &sums, gamma, lambda, standardization, options)
}

/// Selects Nystrom landmarks among the distinct points, deterministically from the seed.
pub(crate) fn landmark_indices(n_points: usize, options: &KernelRidgeOptions) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_points).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    idx.shuffle(&mut rng);
    idx.truncate(options.landmarks.min(n_points));
    idx.sort_unstable();
    idx
}

pub(crate) fn cross_kernel(
    a: &[Vec<f64>],
    rows: &[usize],
    b: &[Vec<f64>],
    cols: &[usize],
    gamma: f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        rbf(&a[rows[i]], &b[cols[j]], gamma)
    })
}

pub(crate) fn fit_grouped(
    groups: &GroupedRows,
    counts: &[f64],
    sums: &[f64],
    gamma: f64,
    lambda: f64,
    standardization: Standardization,
    options: &KernelRidgeOptions,
) -> Result<KernelRidgeModel> {
    let active: Vec<usize> = (0..groups.len()).filter(|&g| counts[g] > 0.0).collect();
    let d = groups.points.first().map_or(0, Vec::len);
    if active.len() <= options.max_exact_support {
        let sub: Vec<Vec<f64>> = active.iter().map(|&g| groups.points[g].clone()).collect();
        let local = GroupedRows {
            points: sub,
            group_of: Vec::new(),
        };
        let gram = local.gram(gamma);
        let c: Vec<f64> = active.iter().map(|&g| counts[g]).collect();
        let s: Vec<f64> = active.iter().map(|&g| sums[g]).collect();
        let ids: Vec<usize> = (0..active.len()).collect();
        let weights = solve_exact(&gram, &ids, &c, &s, lambda)?;
        let support = DMatrix::from_fn(active.len(), d, |i, j| local.points[i][j]);
        return Ok(KernelRidgeModel {
            support_points: support,
            dual_weights: weights,
            bandwidth_gamma: gamma,
            ridge_lambda: lambda,
            standardization,
            nystrom: false,
        });
    }

    let landmarks: Vec<usize> = landmark_indices(active.len(), options)
        .into_iter()
        .map(|i| active[i])
        .collect();
    let k_gl = cross_kernel(&groups.points, &active, &groups.points, &landmarks, gamma);
    let k_ll = cross_kernel(&groups.points, &landmarks, &groups.points, &landmarks, gamma);
    let c: Vec<f64> = active.iter().map(|&g| counts[g]).collect();
    let s: Vec<f64> = active.iter().map(|&g| sums[g]).collect();
    let weights = solve_nystrom(&k_gl, &k_ll, &c, &s, lambda)?;
    let support = DMatrix::from_fn(landmarks.len(), d, |i, j| groups.points[landmarks[i]][j]);
    Ok(KernelRidgeModel {
        support_points: support,
        dual_weights: weights,
        bandwidth_gamma: gamma,
        ridge_lambda: lambda,
        standardization,
        nystrom: true,
    })
}

impl KernelRidgeModel {
    pub fn n_features(&self) -> usize {
        self.standardization.mean.len()
    }

    /// Evaluates the dual expansion at already-standardized points.
    pub(crate) fn predict_standardized(&self, point: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (j, w) in self.dual_weights.iter().enumerate() {
            let mut d2 = 0.0;
            for (c, x) in point.iter().enumerate() {
                let diff = x - self.support_points[(j, c)];
                d2 += diff * diff;
            }
            acc += w * (-self.bandwidth_gamma * d2).exp();
        }
        acc
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        predict_kernel_ridge(self, features)
    }
}

pub fn predict_kernel_ridge(model: &KernelRidgeModel, features: &DMatrix<f64>) -> Result<Vec<f64>> {
    if features.nrows() == 0 {
        return Ok(Vec::new());
    }
    if features.ncols() != model.n_features() {
        return Err(Error::DimensionMismatch {
            expected: model.n_features(),
            actual: features.ncols(),
        });
    }
    let z = model.standardization.apply(features);
    let mut cache: HashMap<Vec<u64>, f64> = HashMap::new();
    Ok((0..z.nrows())
        .map(|i| {
            let row = row_vec(&z, i);
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            *cache
                .entry(key)
                .or_insert_with(|| model.predict_standardized(&row))
        })
        .collect())
}
