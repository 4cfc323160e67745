//! Characterization of selected subsamples and plot-ready CSV output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{Column, EvaluationFrame};
use crate::error::{Error, Result};
use crate::estimator::WorstCaseEstimate;
use crate::oracle::rho_from_alpha;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MutableRate {
    pub column: String,
    pub inside: f64,
    /// `None` when every row is inside the subsample.
    pub outside: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Wasserstein1,
    TotalVariation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalDistance {
    pub column: String,
    pub metric: DistanceMetric,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub column: String,
    pub outcome: String,
    /// `None` when either variable is constant inside the subsample.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsampleReport {
    pub alpha: f64,
    pub subsample_size: usize,
    pub mutable_rates: Vec<MutableRate>,
    pub immutable_marginal_distance: Vec<MarginalDistance>,
    pub within_subsample_correlations: Vec<Correlation>,
}

/// Estimates over an `alpha` grid with their subsample characterizations and
/// the mean of each comparison loss column on the same subsamples.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RiskCurve {
    pub alpha_grid: Vec<f64>,
    pub estimates: Vec<WorstCaseEstimate>,
    pub reports: Vec<SubsampleReport>,
    pub comparison_curves: BTreeMap<String, Vec<f64>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, c) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (c > 0).then(|| s / c as f64)
}

fn split<'a>(values: &'a [f64], h: &'a [u8], keep: u8) -> impl Iterator<Item = f64> + 'a {
    values.iter().zip(h).filter(move |(_, &hv)| hv == keep).map(|(v, _)| *v)
}

/// `W1(P, Q) = integral |F_P - F_Q|` for two empirical distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut x = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        x = next;
    }
    total
}

/// Half the L1 distance between the level frequencies of two samples.
pub fn total_variation(a: &[i64], b: &[i64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut freq: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for v in a {
        freq.entry(*v).or_default().0 += 1.0 / a.len() as f64;
    }
    for v in b {
        freq.entry(*v).or_default().1 += 1.0 / b.len() as f64;
    }
    0.5 * freq.values().map(|(p, q)| (p - q).abs()).sum::<f64>()
}

/// Pearson correlation, or `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let mx = mean(x.iter().copied())?;
    let my = mean(y.iter().copied())?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn check_indicators(frame: &EvaluationFrame, h: &[u8]) -> Result<usize> {
    if h.len() != frame.n() {
        return Err(Error::DimensionMismatch {
            expected: frame.n(),
            actual: h.len(),
        });
    }
    let size = h.iter().filter(|&&v| v == 1).count();
    if size == 0 {
        return Err(Error::EmptySubsample);
    }
    Ok(size)
}

fn source_column<'a>(frame: &'a EvaluationFrame, name: &str) -> Result<&'a Column> {
    frame
        .source
        .column(name)
        .ok_or_else(|| Error::SchemaMismatch(format!("column '{name}' is not in the dataset")))
}

/// Mutable-column rates inside and outside the subsample, distances between
/// subsample and full-sample marginals of each immutable column, and
/// within-subsample correlations of mutable columns with `outcome_column`.
pub fn characterize_subsample(
    frame: &EvaluationFrame,
    h: &[u8],
    alpha: f64,
    outcome_column: Option<&str>,
) -> Result<SubsampleReport> {
    let size = check_indicators(frame, h)?;
    let outcome = outcome_column
        .map(|name| source_column(frame, name).map(|c| (name, c.to_f64())))
        .transpose()?;

    let mut mutable_rates = Vec::new();
    let mut correlations = Vec::new();
    for (j, col) in frame.w_columns.iter().enumerate() {
        let values: Vec<f64> = frame.w_block.column(j).iter().copied().collect();
        mutable_rates.push(MutableRate {
            column: col.name.clone(),
            inside: mean(split(&values, h, 1)).expect("nonempty subsample"),
            outside: mean(split(&values, h, 0)),
        });
        if let Some((name, y)) = &outcome {
            let xs: Vec<f64> = split(&values, h, 1).collect();
            let ys: Vec<f64> = split(y, h, 1).collect();
            correlations.push(Correlation {
                column: col.name.clone(),
                outcome: name.to_string(),
                value: pearson(&xs, &ys),
            });
        }
    }

    let mut distances = Vec::new();
    for name in &frame.partition.immutable_z {
        let (metric, distance) = match source_column(frame, name)? {
            Column::Numeric(v) => {
                let inside: Vec<f64> = split(v, h, 1).collect();
                (DistanceMetric::Wasserstein1, wasserstein1(&inside, v))
            }
            Column::Categorical(v) => {
                let inside: Vec<i64> = v.iter().zip(h).filter(|(_, &hv)| hv == 1).map(|(x, _)| *x).collect();
                (DistanceMetric::TotalVariation, total_variation(&inside, v))
            }
        };
        distances.push(MarginalDistance {
            column: name.clone(),
            metric,
            distance,
        });
    }

    Ok(SubsampleReport {
        alpha,
        subsample_size: size,
        mutable_rates,
        immutable_marginal_distance: distances,
        within_subsample_correlations: correlations,
    })
}

/// Mean of `values` over the rows with `h = 1`.
pub fn subsample_mean(values: &[f64], h: &[u8]) -> Result<f64> {
    if values.len() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: h.len(),
            actual: values.len(),
        });
    }
    mean(split(values, h, 1)).ok_or(Error::EmptySubsample)
}

/// Mean of an alternative loss column over each estimate's subsample.
pub fn compare_on_subsamples(
    frame: &EvaluationFrame,
    estimates: &[WorstCaseEstimate],
    alternative_loss_column: &str,
) -> Result<Vec<f64>> {
    let values = source_column(frame, alternative_loss_column)?.to_f64();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "comparison column '{alternative_loss_column}' has non-finite values"
        )));
    }
    estimates
        .iter()
        .map(|e| {
            check_indicators(frame, &e.h_indicators)?;
            subsample_mean(&values, &e.h_indicators)
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn alpha_order(alphas: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..alphas.len()).collect();
    idx.sort_by(|&a, &b| alphas[a].total_cmp(&alphas[b]));
    idx
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready tidy CSVs, rows in increasing `alpha`:
///
/// * `plot_risk.csv`: `alpha,rho,r_hat,ci_lo,ci_hi,sigma2,subsample_size`
/// * `plot_mutable_rates.csv`: `alpha,column,inside,outside`
/// * `plot_correlations.csv`: `alpha,column,outcome,correlation` (empty when undefined)
/// * `plot_comparisons.csv`: `alpha,column,mean_loss`, only with comparison columns
pub fn emit_plot_data(curve: &RiskCurve, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if curve.estimates.is_empty() {
        return Err(Error::Config("cannot plot an empty risk curve".into()));
    }
    let alphas: Vec<f64> = curve.estimates.iter().map(|e| e.alpha).collect();
    let order = alpha_order(&alphas);
    let mut written = Vec::new();

    let path = out_dir.join("plot_risk.csv");
    let rows = order
        .iter()
        .map(|&i| {
            let e = &curve.estimates[i];
            Ok(vec![
                e.alpha.to_string(),
                rho_from_alpha(e.alpha)?.to_string(),
                e.r_hat.to_string(),
                e.ci_lower.to_string(),
                e.ci_upper.to_string(),
                e.sigma2_hat.to_string(),
                e.subsample_size.to_string(),
            ])
        })
        .collect::<Result<_>>()?;
    write_rows(
        &path,
        &["alpha", "rho", "r_hat", "ci_lo", "ci_hi", "sigma2", "subsample_size"],
        rows,
    )?;
    written.push(path);

    let report_order = alpha_order(&curve.reports.iter().map(|r| r.alpha).collect::<Vec<_>>());
    let path = out_dir.join("plot_mutable_rates.csv");
    let rows = report_order
        .iter()
        .flat_map(|&i| {
            let r = &curve.reports[i];
            r.mutable_rates.iter().map(move |m| {
                vec![r.alpha.to_string(), m.column.clone(), m.inside.to_string(), fmt_opt(m.outside)]
            })
        })
        .collect();
    write_rows(&path, &["alpha", "column", "inside", "outside"], rows)?;
    written.push(path);

    let path = out_dir.join("plot_correlations.csv");
    let rows = report_order
        .iter()
        .flat_map(|&i| {
            let r = &curve.reports[i];
            r.within_subsample_correlations.iter().map(move |c| {
                vec![r.alpha.to_string(), c.column.clone(), c.outcome.clone(), fmt_opt(c.value)]
            })
        })
        .collect();
    write_rows(&path, &["alpha", "column", "outcome", "correlation"], rows)?;
    written.push(path);

    if !curve.comparison_curves.is_empty() {
        let path = out_dir.join("plot_comparisons.csv");
        let rows = order
            .iter()
            .flat_map(|&i| {
                let alpha = alphas[i];
                curve.comparison_curves.iter().map(move |(name, values)| {
                    vec![alpha.to_string(), name.clone(), values[i].to_string()]
                })
            })
            .collect();
        write_rows(&path, &["alpha", "column", "mean_loss"], rows)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_folds, build_frame, TabularDataset, VariablePartition};
    use crate::estimator::estimate_with_nuisances;
    use crate::oracle::{worst_case_selection, DiscreteInstance};
    use std::sync::Arc;

    fn frame() -> EvaluationFrame {
        let data = TabularDataset::new(
            ["w", "age", "site", "outcome", "alt"].map(String::from).to_vec(),
            vec![
                Column::Categorical(vec![1, 0, 1, 0, 1, 0]),
                Column::Numeric(vec![30.0, 40.0, 50.0, 60.0, 70.0, 80.0]),
                Column::Categorical(vec![0, 0, 1, 1, 2, 2]),
                Column::Numeric(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
                Column::Numeric(vec![0.5; 6]),
            ],
        )
        .unwrap();
        let part = VariablePartition::new(&["w"], &["age", "site"]);
        build_frame(
            Arc::new(data),
            &part,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            assign_folds(6, 2, 0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn full_subsample_has_zero_distance() {
        let f = frame();
        let r = characterize_subsample(&f, &[1; 6], 0.0, Some("outcome")).unwrap();
        assert_eq!(r.subsample_size, 6);
        assert!(r.immutable_marginal_distance.iter().all(|d| d.distance == 0.0));
        assert_eq!(r.immutable_marginal_distance[0].metric, DistanceMetric::Wasserstein1);
        assert_eq!(r.immutable_marginal_distance[1].metric, DistanceMetric::TotalVariation);
        assert!(r.mutable_rates.iter().all(|m| m.outside.is_none()));
    }

    #[test]
    fn selecting_w_one_gives_unit_rate() {
        let f = frame();
        let h = [1, 0, 1, 0, 1, 0];
        let r = characterize_subsample(&f, &h, 0.5, Some("outcome")).unwrap();
        let w1 = r.mutable_rates.iter().find(|m| m.column == "w=1").unwrap();
        assert_eq!(w1.inside, 1.0);
        assert_eq!(w1.outside, Some(0.0));
        // w=1 is constant inside the subsample, so its correlation is undefined
        assert!(r.within_subsample_correlations.iter().all(|c| c.value.is_none()));
        // ages {30, 50, 70} against {30..80}: |F_sub - F_full| integrates to 5
        assert!((r.immutable_marginal_distance[0].distance - 5.0).abs() < 1e-12);
        // sites {0, 1, 2} equally often in both
        assert!(r.immutable_marginal_distance[1].distance.abs() < 1e-12);
    }

    #[test]
    fn empty_subsample_is_an_error() {
        assert!(matches!(
            characterize_subsample(&frame(), &[0; 6], 0.5, None),
            Err(Error::EmptySubsample)
        ));
    }

    #[test]
    fn wasserstein_oracle() {
        // equal sizes: W1 is the mean absolute difference of sorted samples
        let a = [3.0, 1.0, 4.0, 1.5];
        let b = [2.0, 7.0, 1.0, 8.0];
        let mut sa = a.to_vec();
        let mut sb = b.to_vec();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let want: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0;
        assert!((wasserstein1(&a, &b) - want).abs() < 1e-12);
        assert_eq!(wasserstein1(&a, &a), 0.0);
        assert!((total_variation(&[0, 0, 1], &[1, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn comparisons() {
        let f = frame();
        let losses = f.losses.clone();
        let folds = f.folds.clone();
        let mu = losses.clone();
        let est = estimate_with_nuisances(&losses, &mu, &[0.35; 6], &[], &folds, 0.5, 0.95).unwrap();
        let alt = compare_on_subsamples(&f, std::slice::from_ref(&est), "alt").unwrap();
        assert_eq!(alt, vec![0.5]);
        let same = subsample_mean(&losses, &est.h_indicators).unwrap();
        assert!((same - 0.5).abs() < 1e-12);
        // indicator of w = 1 reproduces the mutable rate
        let wcol = f.source.column("w").unwrap().to_f64();
        let via_compare = subsample_mean(&wcol, &est.h_indicators).unwrap();
        let report = characterize_subsample(&f, &est.h_indicators, 0.5, None).unwrap();
        let rate = report.mutable_rates.iter().find(|m| m.column == "w=1").unwrap().inside;
        assert!((via_compare - rate).abs() < 1e-15);
    }

    #[test]
    fn oracle_mutable_rate_rises_with_alpha() {
        // in both strata the W = 1 cell carries the higher mean
        let inst = DiscreteInstance::new(
            vec![0, 1],
            vec![0, 1],
            vec![vec![0.35, 0.2], vec![0.15, 0.3]],
            vec![vec![0.2, 0.1], vec![0.7, 0.4]],
        )
        .unwrap();
        let mut prev = 0.0;
        for s in 0..10 {
            let alpha = s as f64 / 10.0;
            let h = worst_case_selection(&inst, alpha).unwrap();
            let sel: f64 = (0..2).map(|z| h[1][z] * inst.joint_pmf[1][z]).sum();
            let all: f64 = (0..2)
                .flat_map(|z| (0..2).map(move |w| (w, z)))
                .map(|(w, z)| h[w][z] * inst.joint_pmf[w][z])
                .sum();
            let rate = sel / all;
            assert!(rate >= prev - 1e-12);
            prev = rate;
        }
        assert!((prev - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plot_files_sorted_by_alpha() {
        let f = frame();
        let mk = |alpha: f64| {
            estimate_with_nuisances(&f.losses, &f.losses, &[0.35; 6], &[], &f.folds, alpha, 0.95).unwrap()
        };
        let estimates = vec![mk(0.5), mk(0.25)];
        let reports = estimates
            .iter()
            .map(|e| characterize_subsample(&f, &e.h_indicators, e.alpha, Some("outcome")).unwrap())
            .collect();
        let curve = RiskCurve {
            alpha_grid: vec![0.5, 0.25],
            estimates,
            reports,
            comparison_curves: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plot_data(&curve, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let risk = std::fs::read_to_string(dir.path().join("plot_risk.csv")).unwrap();
        let lines: Vec<&str> = risk.lines().collect();
        assert_eq!(lines[0], "alpha,rho,r_hat,ci_lo,ci_hi,sigma2,subsample_size");
        assert!(lines[1].starts_with("0.25,") && lines[2].starts_with("0.5,"));
        let again = tempfile::tempdir().unwrap();
        emit_plot_data(&curve, again.path()).unwrap();
        for name in ["plot_risk.csv", "plot_mutable_rates.csv", "plot_correlations.csv"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(again.path().join(name)).unwrap()
            );
        }
    }
}
