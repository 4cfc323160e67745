//! Seeded synthetic datasets: samples from discrete instances and the
//! two-dimensional sine-boundary toy problem.
//!
//! All draws come from `ChaCha8Rng::seed_from_u64(seed)`. Uniforms are
//! `((x >> 11) + 0.5) / 2^53` for a raw 64-bit output `x`, and normals are the
//! standard normal inverse CDF of such a uniform.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{binary_cross_entropy, Column, TabularDataset};
use crate::error::{Error, Result};
use crate::oracle::{DiscreteInstance, LossNoise};

/// Names accepted by [`bundled_instance`].
pub const BUNDLED_INSTANCES: [&str; 3] = ["discrete-synthetic", "two-point", "stratified-four"];

struct Stream(ChaCha8Rng);

impl Stream {
    fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform on the open interval `(0, 1)`.
    fn uniform(&mut self) -> f64 {
        ((self.0.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        Normal::standard().inverse_cdf(self.uniform())
    }
}

/// The instances shipped with the tool.
///
/// `discrete-synthetic` has `Z` in three levels with mass (0.5, 0.3, 0.2) and
/// four `W` levels per stratum; at `alpha = 0.5` the cut falls inside a cell
/// for `z = 0` and `z = 2` and on a cell boundary for `z = 1`.
pub fn bundled_instance(name: &str) -> Result<DiscreteInstance> {
    let (pmf, mu): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match name {
        "discrete-synthetic" => {
            let pz = [0.5, 0.3, 0.2];
            let cond = [[0.4, 0.25, 0.1], [0.3, 0.25, 0.2], [0.2, 0.25, 0.3], [0.1, 0.25, 0.4]];
            let pmf = cond
                .iter()
                .map(|row| row.iter().zip(pz).map(|(c, p)| c * p).collect())
                .collect();
            let mu = vec![
                vec![0.10, 0.50, 0.90],
                vec![0.30, 0.20, 0.15],
                vec![0.60, 0.70, 0.45],
                vec![0.85, 0.40, 0.25],
            ];
            (pmf, mu)
        }
        "two-point" => (vec![vec![0.5], vec![0.5]], vec![vec![0.2], vec![0.8]]),
        "stratified-four" => (
            vec![vec![0.25, 0.25], vec![0.25, 0.25]],
            vec![vec![0.0, 0.4], vec![1.0, 0.6]],
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown instance '{other}'; expected one of {}",
                BUNDLED_INSTANCES.join(", ")
            )))
        }
    };
    let nw = pmf.len() as i64;
    let nz = pmf[0].len() as i64;
    let mut inst = DiscreteInstance {
        w_levels: (0..nw).collect(),
        z_levels: (0..nz).collect(),
        joint_pmf: pmf,
        mu_table: mu,
        loss_noise: LossNoise::Auto,
    };
    // the products above can be off from 1 by a rounding error
    let total: f64 = inst.joint_pmf.iter().flatten().sum();
    inst.joint_pmf[0][0] += 1.0 - total;
    inst.validate()?;
    Ok(inst)
}

/// Draws `n` i.i.d. rows with columns `w`, `z` (categorical level codes) and `loss`.
pub fn sample_discrete_instance(instance: &DiscreteInstance, n: usize, seed: u64) -> Result<TabularDataset> {
    instance.validate()?;
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let in_unit = instance.mu_table.iter().flatten().all(|m| (0.0..=1.0).contains(m));
    let noise = match instance.loss_noise {
        LossNoise::Auto if in_unit => LossNoise::Bernoulli,
        LossNoise::Auto => LossNoise::Normal { sd: 0.1 },
        LossNoise::Bernoulli if !in_unit => {
            return Err(Error::Config("Bernoulli losses need every cell mean in [0, 1]".into()))
        }
        other => other,
    };

    let cells: Vec<(usize, usize)> = (0..instance.n_w())
        .flat_map(|w| (0..instance.n_z()).map(move |z| (w, z)))
        .collect();
    let mut cdf = Vec::with_capacity(cells.len());
    let mut acc = 0.0;
    for &(w, z) in &cells {
        acc += instance.joint_pmf[w][z];
        cdf.push(acc);
    }

    let mut rng = Stream::new(seed);
    let mut ws = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let mut losses = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.uniform() * acc;
        let c = cdf.partition_point(|&c| c < u).min(cells.len() - 1);
        let (w, z) = cells[c];
        let mu = instance.mu_table[w][z];
        let loss = match noise {
            LossNoise::Bernoulli => {
                if rng.uniform() < mu {
                    1.0
                } else {
                    0.0
                }
            }
            LossNoise::Normal { sd } => mu + sd * rng.normal(),
            _ => mu,
        };
        ws.push(instance.w_levels[w]);
        zs.push(instance.z_levels[z]);
        losses.push(loss);
    }
    TabularDataset::new(
        vec!["w".into(), "z".into(), "loss".into()],
        vec![Column::Categorical(ws), Column::Categorical(zs), Column::Numeric(losses)],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySineConfig {
    pub n: usize,
    pub seed: u64,
    /// `(b0, b1, b2)` of the logistic classifier `p = 1 / (1 + exp(-(b0 + b1 x1 + b2 x2)))`.
    pub classifier: [f64; 3],
}

/// `x1, x2 ~ N(0, 1)` and `y = [x1 > sin(2 x2)]`.
pub fn toy_sine_features(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<i64>) {
    let mut rng = Stream::new(seed);
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.normal();
        let b = rng.normal();
        x1.push(a);
        x2.push(b);
        y.push(toy_sine_label(a, b));
    }
    (x1, x2, y)
}

pub fn toy_sine_label(x1: f64, x2: f64) -> i64 {
    i64::from(x1 > (2.0 * x2).sin())
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Columns `x1`, `x2`, `y`, `prediction` and `loss` (binary cross-entropy).
pub fn generate_toy_sine(config: &ToySineConfig) -> Result<TabularDataset> {
    if config.n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let (x1, x2, y) = toy_sine_features(config.n, config.seed);
    let [b0, b1, b2] = config.classifier;
    let p: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| logistic(b0 + b1 * a + b2 * b)).collect();
    let loss: Vec<f64> = p
        .iter()
        .zip(&y)
        .map(|(&p, &y)| binary_cross_entropy(p, y as f64, 1e-12))
        .collect();
    TabularDataset::new(
        ["x1", "x2", "y", "prediction", "loss"].map(String::from).to_vec(),
        vec![
            Column::Numeric(x1),
            Column::Numeric(x2),
            Column::Categorical(y),
            Column::Numeric(p),
            Column::Numeric(loss),
        ],
    )
}

/// Toy data whose classifier is a logistic regression fit to the same rows.
pub fn generate_toy_sine_fitted(n: usize, seed: u64) -> Result<(TabularDataset, [f64; 3])> {
    let (x1, x2, y) = toy_sine_features(n, seed);
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { x1[i] } else { x2[i] });
    let b = fit_logistic(&x, &y)?;
    let coef = [b[0], b[1], b[2]];
    let data = generate_toy_sine(&ToySineConfig {
        n,
        seed,
        classifier: coef,
    })?;
    Ok((data, coef))
}

/// Maximum-likelihood logistic regression with an intercept, by Newton's method.
/// Returns `(b0, b1, ..., bd)`.
pub fn fit_logistic(features: &DMatrix<f64>, labels: &[i64]) -> Result<Vec<f64>> {
    let (n, d) = features.shape();
    if n != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    if labels.iter().any(|&y| y != 0 && y != 1) {
        return Err(Error::Domain("logistic labels must be 0 or 1".into()));
    }
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { features[(i, j - 1)] });
    let y = DVector::from_iterator(n, labels.iter().map(|&v| v as f64));
    let mut beta = DVector::zeros(d + 1);
    for _ in 0..100 {
        let eta = &x * &beta;
        let p = eta.map(logistic);
        let grad = x.transpose() * (&y - &p);
        let w = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let mut xw = x.clone();
        for (i, wi) in w.iter().enumerate() {
            xw.row_mut(i).scale_mut(*wi);
        }
        let mut hess = x.transpose() * xw;
        for j in 0..=d {
            hess[(j, j)] += 1e-10;
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::SingularSystem("logistic Hessian is not positive definite".into()))?
            .solve(&grad);
        beta += &step;
        if step.amax() < 1e-12 {
            return Ok(beta.iter().copied().collect());
        }
    }
    Err(Error::NonConvergence("logistic regression did not converge in 100 steps".into()))
}
