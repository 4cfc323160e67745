//! B-spline design matrices for the conditional quantile learner.
//!
//! Continuous columns are expanded into a clamped B-spline basis with interior
//! knots at empirical quantiles. Binary columns (including one-hot indicators)
//! pass through unchanged. Constant columns pass through and are flagged.
//! Optional interaction columns multiply every other basis term. The first
//! design column is always the intercept.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_degree() -> usize {
    3
}

fn default_knots() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineBasisConfig {
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Interior knots per continuous column, placed at empirical quantiles.
    #[serde(default = "default_knots")]
    pub knots_per_column: usize,
    /// Binary columns whose indicator multiplies every other basis term.
    /// A name matches an encoded column exactly, or every `name=level` column
    /// of a one-hot encoded categorical.
    #[serde(default)]
    pub interaction_columns: Vec<String>,
}

impl Default for SplineBasisConfig {
    fn default() -> Self {
        Self {
            degree: default_degree(),
            knots_per_column: default_knots(),
            interaction_columns: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnTreatment {
    /// Clamped knot vector; inputs are clamped to `[knots[0], knots[last]]`.
    Spline { knots: Vec<f64> },
    PassThrough,
    /// Constant in the fitting data; passed through as-is.
    Degenerate,
}

/// A basis whose knots have been placed on fitting data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FittedBasis {
    pub config: SplineBasisConfig,
    pub column_names: Vec<String>,
    pub treatments: Vec<ColumnTreatment>,
    pub interaction_indices: Vec<usize>,
    /// Design width including the intercept.
    pub n_design_columns: usize,
    /// Names of columns that were constant when the knots were placed.
    pub degenerate_columns: Vec<String>,
}

/// Linear-interpolation empirical quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Clamped knot vector with `n_interior` quantile knots; duplicates and knots on
/// the boundary are dropped so interior knots are strictly increasing.
pub fn quantile_knots(values: &[f64], n_interior: usize, degree: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let mut interior: Vec<f64> = (1..=n_interior)
        .map(|j| quantile_sorted(&sorted, j as f64 / (n_interior + 1) as f64))
        .filter(|&k| k > lo && k < hi)
        .collect();
    interior.dedup();
    let mut knots = vec![lo; degree + 1];
    knots.extend(interior);
    knots.extend(std::iter::repeat_n(hi, degree + 1));
    knots
}

/// Number of basis functions of a clamped knot vector.
pub fn basis_dimension(knots: &[f64], degree: usize) -> usize {
    knots.len() - degree - 1
}

/// Values of all B-spline basis functions at `x` (clamped into the knot range),
/// via the triangular Cox-de Boor recursion over the single nonzero span.
pub fn bspline_values(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let n_basis = basis_dimension(knots, degree);
    let lo = knots[degree];
    let hi = knots[n_basis];
    let x = x.clamp(lo, hi);

    // span s with knots[s] <= x < knots[s+1]; the right end uses the last nonempty span
    let mut span = degree;
    while span + 1 < n_basis && knots[span + 1] <= x {
        span += 1;
    }

    let mut local = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    local[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { local[r] / denom };
            local[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        local[j] = saved;
    }

    let mut out = vec![0.0; n_basis];
    for (r, v) in local.into_iter().enumerate() {
        out[span - degree + r] = v;
    }
    out
}

fn is_binary(values: &[f64]) -> bool {
    values.iter().all(|&v| v == 0.0 || v == 1.0)
}

fn matches_interaction(name: &str, wanted: &str) -> bool {
    name == wanted
        || name
            .strip_prefix(wanted)
            .is_some_and(|rest| rest.starts_with('='))
}

/// Places knots on `z_block` and returns the design matrix together with the
/// fitted basis. An empty block yields a single intercept column.
pub fn build_spline_basis(
    z_block: &DMatrix<f64>,
    column_names: &[String],
    config: &SplineBasisConfig,
) -> Result<(DMatrix<f64>, FittedBasis)> {
    if config.degree < 1 {
        return Err(Error::Config("spline degree must be at least 1".into()));
    }
    if column_names.len() != z_block.ncols() {
        return Err(Error::DimensionMismatch {
            expected: z_block.ncols(),
            actual: column_names.len(),
        });
    }
    if z_block.ncols() > 0 && z_block.nrows() == 0 {
        return Err(Error::InsufficientData("cannot place knots on zero rows".into()));
    }

    let mut treatments = Vec::with_capacity(z_block.ncols());
    let mut degenerate = Vec::new();
    for (j, name) in column_names.iter().enumerate() {
        let values: Vec<f64> = z_block.column(j).iter().copied().collect();
        let first = values[0];
        if values.iter().all(|&v| v == first) {
            log::warn!("immutable column '{name}' is constant; passing it through unsplined");
            degenerate.push(name.clone());
            treatments.push(ColumnTreatment::Degenerate);
        } else if is_binary(&values) {
            treatments.push(ColumnTreatment::PassThrough);
        } else {
            treatments.push(ColumnTreatment::Spline {
                knots: quantile_knots(&values, config.knots_per_column, config.degree),
            });
        }
    }

    let mut interaction_indices = Vec::new();
    for wanted in &config.interaction_columns {
        let hits: Vec<usize> = column_names
            .iter()
            .enumerate()
            .filter(|(_, n)| matches_interaction(n, wanted))
            .map(|(j, _)| j)
            .collect();
        if hits.is_empty() {
            return Err(Error::Config(format!(
                "interaction column '{wanted}' is not an immutable column"
            )));
        }
        for j in hits {
            if matches!(treatments[j], ColumnTreatment::Spline { .. }) {
                return Err(Error::Config(format!(
                    "interaction column '{}' must be binary",
                    column_names[j]
                )));
            }
            if !interaction_indices.contains(&j) {
                interaction_indices.push(j);
            }
        }
    }

    let mut basis = FittedBasis {
        config: config.clone(),
        column_names: column_names.to_vec(),
        treatments,
        interaction_indices,
        n_design_columns: 0,
        degenerate_columns: degenerate,
    };
    let design = basis.expand(z_block)?;
    basis.n_design_columns = design.ncols();
    Ok((design, basis))
}

impl FittedBasis {
    /// Design matrix for new rows using the stored knots.
    pub fn design(&self, z_block: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.expand(z_block)?;
        if d.ncols() != self.n_design_columns {
            return Err(Error::DimensionMismatch {
                expected: self.n_design_columns,
                actual: d.ncols(),
            });
        }
        Ok(d)
    }

    fn expand(&self, z_block: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z_block.ncols() != self.treatments.len() {
            return Err(Error::DimensionMismatch {
                expected: self.treatments.len(),
                actual: z_block.ncols(),
            });
        }
        let n = z_block.nrows();
        let degree = self.config.degree;

        // (source column, values) for every non-intercept main-effect term
        let mut terms: Vec<(usize, Vec<f64>)> = Vec::new();
        for (j, t) in self.treatments.iter().enumerate() {
            match t {
                ColumnTreatment::Spline { knots } => {
                    let dim = basis_dimension(knots, degree);
                    let mut cols = vec![vec![0.0; n]; dim];
                    for i in 0..n {
                        for (b, v) in bspline_values(knots, degree, z_block[(i, j)])
                            .into_iter()
                            .enumerate()
                        {
                            cols[b][i] = v;
                        }
                    }
                    terms.extend(cols.into_iter().map(|c| (j, c)));
                }
                ColumnTreatment::PassThrough | ColumnTreatment::Degenerate => {
                    terms.push((j, z_block.column(j).iter().copied().collect()));
                }
            }
        }

        let mut products: Vec<Vec<f64>> = Vec::new();
        for &s in &self.interaction_indices {
            for (src, values) in &terms {
                if *src == s {
                    continue;
                }
                products.push((0..n).map(|i| z_block[(i, s)] * values[i]).collect());
            }
        }

        let width = 1 + terms.len() + products.len();
        Ok(DMatrix::from_fn(n, width, |i, c| {
            if c == 0 {
                1.0
            } else if c <= terms.len() {
                terms[c - 1].1[i]
            } else {
                products[c - 1 - terms.len()][i]
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Reference evaluator: the textbook recursive Cox-de Boor definition with
    /// 0/0 := 0 and the right end of the domain attached to the last span.
    fn naive_basis(knots: &[f64], i: usize, p: usize, x: f64, last_span: usize) -> f64 {
        if p == 0 {
            if i == last_span {
                return if knots[i] <= x && x <= knots[i + 1] { 1.0 } else { 0.0 };
            }
            return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * naive_basis(knots, i, p - 1, x, last_span);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - x) / d2 * naive_basis(knots, i + 1, p - 1, x, last_span);
        }
        v
    }

    fn uniform_values(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37).sin() * 3.0 + i as f64 * 0.01).collect()
    }

    #[test]
    fn empty_block_is_intercept_only() {
        let (d, b) = build_spline_basis(&DMatrix::zeros(4, 0), &[], &SplineBasisConfig::default())
            .unwrap();
        assert_eq!(d.shape(), (4, 1));
        assert!(d.iter().all(|&v| v == 1.0));
        assert_eq!(b.n_design_columns, 1);
    }

    #[test]
    fn binary_column_passes_through() {
        let z = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 1.0, 0.0]);
        let (d, _) =
            build_spline_basis(&z, &["s".to_string()], &SplineBasisConfig::default()).unwrap();
        assert_eq!(d.ncols(), 2);
        assert_eq!(d.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cubic_with_five_knots_has_nine_terms() {
        let vals = uniform_values(200);
        let z = DMatrix::from_column_slice(vals.len(), 1, &vals);
        let (d, b) =
            build_spline_basis(&z, &["age".to_string()], &SplineBasisConfig::default()).unwrap();
        assert_eq!(d.ncols(), 1 + 9);
        let ColumnTreatment::Spline { knots } = &b.treatments[0] else {
            panic!("expected spline");
        };
        // compare against the reference evaluator at every row
        let last = basis_dimension(knots, 3) - 1;
        for i in 0..vals.len() {
            for k in 0..9 {
                let r = naive_basis(knots, k, 3, vals[i], last);
                assert!((d[(i, 1 + k)] - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_column_is_flagged() {
        let z = DMatrix::from_column_slice(3, 1, &[2.0, 2.0, 2.0]);
        let (d, b) =
            build_spline_basis(&z, &["c".to_string()], &SplineBasisConfig::default()).unwrap();
        assert_eq!(b.degenerate_columns, vec!["c".to_string()]);
        assert_eq!(d.ncols(), 2);
    }

    #[test]
    fn interactions_multiply_other_terms() {
        let vals = uniform_values(50);
        let s: Vec<f64> = (0..50).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let mut data = vals.clone();
        data.extend(&s);
        let z = DMatrix::from_column_slice(50, 2, &data);
        let cfg = SplineBasisConfig {
            interaction_columns: vec!["s".into()],
            ..Default::default()
        };
        let (d, _) = build_spline_basis(&z, &["age".to_string(), "s".to_string()], &cfg).unwrap();
        // intercept + 9 spline + s + 9 products
        assert_eq!(d.ncols(), 1 + 9 + 1 + 9);
        for i in 0..50 {
            for k in 0..9 {
                assert_eq!(d[(i, 11 + k)], s[i] * d[(i, 1 + k)]);
            }
        }
    }

    #[test]
    fn interaction_with_one_hot_prefix() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let names = vec!["g=0".to_string(), "g=1".to_string()];
        let cfg = SplineBasisConfig {
            interaction_columns: vec!["g".into()],
            ..Default::default()
        };
        let (d, b) = build_spline_basis(&z, &names, &cfg).unwrap();
        assert_eq!(b.interaction_indices, vec![0, 1]);
        assert_eq!(d.ncols(), 1 + 2 + 2);
    }

    #[test]
    fn non_binary_interaction_is_rejected() {
        let vals = uniform_values(20);
        let z = DMatrix::from_column_slice(20, 1, &vals);
        let cfg = SplineBasisConfig {
            interaction_columns: vec!["age".into()],
            ..Default::default()
        };
        assert!(build_spline_basis(&z, &["age".to_string()], &cfg).is_err());
    }

    #[test]
    fn design_reuses_knots_and_checks_width() {
        let vals = uniform_values(100);
        let z = DMatrix::from_column_slice(100, 1, &vals);
        let (d, b) =
            build_spline_basis(&z, &["age".to_string()], &SplineBasisConfig::default()).unwrap();
        assert_eq!(b.design(&z).unwrap(), d);
        assert!(b.design(&DMatrix::zeros(3, 2)).is_err());
        // out-of-range inputs clamp to the boundary
        let far = DMatrix::from_column_slice(1, 1, &[1e6]);
        let row = b.design(&far).unwrap();
        assert!((row[(0, 9)] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn partition_of_unity(
            values in proptest::collection::vec(-50.0f64..50.0, 8..60),
            degree in 1usize..5,
            n_knots in 0usize..8,
            t in 0.0f64..=1.0,
        ) {
            let knots = quantile_knots(&values, n_knots, degree);
            prop_assume!(knots[0] < knots[knots.len() - 1]);
            let x = knots[0] + t * (knots[knots.len() - 1] - knots[0]);
            let v = bspline_values(&knots, degree, x);
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!(v.iter().all(|&b| b >= -1e-14));
            let interior = &knots[degree + 1..knots.len() - degree - 1];
            prop_assert!(interior.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
