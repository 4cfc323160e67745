//! Tabular ingestion, per-row losses, the mutable/immutable variable partition,
//! and cross-fitting fold assignment.
//!
//! The estimator never sees raw columns directly. It consumes an
//! [`EvaluationFrame`]: one loss per row, a numeric block for the mutable
//! columns `W`, a numeric block for the immutable columns `Z`, and a fold label
//! per row. Categorical `W`/`Z` columns are one-hot encoded when the frame is
//! built and the encoding is recorded so reports can decode levels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Numeric,
    Categorical,
}

/// A single typed column. Categorical values are integer codes.
#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<i64>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column_type(&self) -> ColumnType {
        match self {
            Column::Numeric(_) => ColumnType::Numeric,
            Column::Categorical(_) => ColumnType::Categorical,
        }
    }

    pub fn value(&self, row: usize) -> f64 {
        match self {
            Column::Numeric(v) => v[row],
            Column::Categorical(v) => v[row] as f64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Column::Numeric(v) => v.clone(),
            Column::Categorical(v) => v.iter().map(|&c| c as f64).collect(),
        }
    }

    /// Categorical, or numeric with only integer values.
    pub fn is_discrete(&self) -> bool {
        match self {
            Column::Categorical(_) => true,
            Column::Numeric(v) => v.iter().all(|x| x.fract() == 0.0),
        }
    }

    /// Sorted distinct codes of a categorical column.
    pub fn levels(&self) -> Vec<i64> {
        match self {
            Column::Categorical(v) => {
                let set: BTreeSet<i64> = v.iter().copied().collect();
                set.into_iter().collect()
            }
            Column::Numeric(_) => Vec::new(),
        }
    }
}

/// Declared column types, keyed by column name.
pub type Schema = BTreeMap<String, ColumnType>;

/// In-memory table with unique column names, equal column lengths and no
/// missing values.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    column_names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl TabularDataset {
    pub fn new(column_names: Vec<String>, columns: Vec<Column>) -> Result<Self> {
        if column_names.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                expected: column_names.len(),
                actual: columns.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for name in &column_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::SchemaMismatch(format!("duplicate column '{name}'")));
            }
        }
        let n_rows = columns.first().map_or(0, Column::len);
        for (name, col) in column_names.iter().zip(&columns) {
            if col.len() != n_rows {
                return Err(Error::SchemaMismatch(format!(
                    "column '{name}' has {} rows, expected {n_rows}",
                    col.len()
                )));
            }
            if let Column::Numeric(v) = col {
                if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Parse {
                        row: row + 1,
                        column: name.clone(),
                        detail: "non-finite value".into(),
                    });
                }
            }
        }
        Ok(Self {
            column_names,
            columns,
            n_rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.column_names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
    }

    fn require(&self, name: &str) -> Result<&Column> {
        self.column(name)
            .ok_or_else(|| Error::SchemaMismatch(format!("unknown column '{name}'")))
    }

    pub fn schema(&self) -> Schema {
        self.column_names
            .iter()
            .zip(&self.columns)
            .map(|(n, c)| (n.clone(), c.column_type()))
            .collect()
    }

    /// Returns a copy with one more column appended.
    pub fn with_column(&self, name: &str, column: Column) -> Result<Self> {
        let mut names = self.column_names.clone();
        let mut cols = self.columns.clone();
        names.push(name.to_string());
        cols.push(column);
        Self::new(names, cols)
    }

    pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

        let header_set: BTreeSet<&str> = header.iter().map(String::as_str).collect();
        if header_set.len() != header.len() {
            return Err(Error::SchemaMismatch("duplicate header names".into()));
        }
        let missing: Vec<&str> = schema
            .keys()
            .map(String::as_str)
            .filter(|k| !header_set.contains(k))
            .collect();
        let extra: Vec<&str> = header
            .iter()
            .map(String::as_str)
            .filter(|h| !schema.contains_key(*h))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::SchemaMismatch(format!(
                "missing columns {missing:?}, undeclared columns {extra:?}"
            )));
        }

        let types: Vec<ColumnType> = header.iter().map(|h| schema[h]).collect();
        let mut columns: Vec<Column> = types
            .iter()
            .map(|t| match t {
                ColumnType::Numeric => Column::Numeric(Vec::new()),
                ColumnType::Categorical => Column::Categorical(Vec::new()),
            })
            .collect();

        for (i, record) in rdr.records().enumerate() {
            let row = i + 1;
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::Parse {
                    row,
                    column: header.get(record.len()).cloned().unwrap_or_default(),
                    detail: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            for (j, cell) in record.iter().enumerate() {
                let cell = cell.trim();
                let bad = |detail: &str| Error::Parse {
                    row,
                    column: header[j].clone(),
                    detail: format!("{detail}: '{cell}'"),
                };
                match &mut columns[j] {
                    Column::Numeric(v) => {
                        let x: f64 = cell.parse().map_err(|_| bad("not a number"))?;
                        if !x.is_finite() {
                            return Err(bad("non-finite value"));
                        }
                        v.push(x);
                    }
                    Column::Categorical(v) => {
                        let c: i64 = cell.parse().map_err(|_| bad("not an integer code"))?;
                        v.push(c);
                    }
                }
            }
        }

        if columns.first().map_or(0, Column::len) == 0 {
            return Err(Error::EmptyDataset);
        }
        Self::new(header, columns)
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.column_names)?;
        let mut record = Vec::with_capacity(self.columns.len());
        for i in 0..self.n_rows {
            record.clear();
            for col in &self.columns {
                record.push(match col {
                    Column::Numeric(v) => format!("{}", v[i]),
                    Column::Categorical(v) => v[i].to_string(),
                });
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_csv_to(File::create(path)?)
    }
}

/// Reads a CSV file with a header row; every header must be declared in `schema`.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<TabularDataset> {
    let file = File::open(path)?;
    TabularDataset::read_csv(file, schema)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ZeroOne,
    BinaryCrossEntropy,
    SquaredError,
    Precomputed,
}

fn default_clip() -> f64 {
    1e-12
}

/// How per-row losses are obtained from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub prediction_column: Option<String>,
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub loss_column: Option<String>,
    #[serde(default = "default_clip")]
    pub clip_epsilon: f64,
}

impl LossSpec {
    pub fn precomputed(loss_column: &str) -> Self {
        Self {
            kind: LossKind::Precomputed,
            prediction_column: None,
            label_column: None,
            loss_column: Some(loss_column.into()),
            clip_epsilon: default_clip(),
        }
    }

    pub fn from_predictions(kind: LossKind, prediction: &str, label: &str) -> Self {
        Self {
            kind,
            prediction_column: Some(prediction.into()),
            label_column: Some(label.into()),
            loss_column: None,
            clip_epsilon: default_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pair = self.prediction_column.is_some() && self.label_column.is_some();
        let any_pair = self.prediction_column.is_some() || self.label_column.is_some();
        match self.kind {
            LossKind::Precomputed => {
                if self.loss_column.is_none() || any_pair {
                    return Err(Error::Config(
                        "precomputed loss needs loss_column and no prediction/label columns".into(),
                    ));
                }
            }
            _ => {
                if !pair || self.loss_column.is_some() {
                    return Err(Error::Config(format!(
                        "{:?} loss needs prediction_column and label_column and no loss_column",
                        self.kind
                    )));
                }
            }
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 0.5) {
            return Err(Error::Config(format!(
                "clip_epsilon must lie in (0, 0.5), got {}",
                self.clip_epsilon
            )));
        }
        Ok(())
    }
}

fn integer_codes(col: &Column, name: &str) -> Result<Vec<i64>> {
    match col {
        Column::Categorical(v) => Ok(v.clone()),
        Column::Numeric(v) => v
            .iter()
            .map(|&x| {
                if x.fract() == 0.0 {
                    Ok(x as i64)
                } else {
                    Err(Error::Domain(format!(
                        "column '{name}' holds non-integer value {x} where a class code is required"
                    )))
                }
            })
            .collect(),
    }
}

/// Binary cross-entropy with the probability clamped into `[clip, 1 - clip]`.
pub fn binary_cross_entropy(p: f64, y: f64, clip: f64) -> f64 {
    let p = p.clamp(clip, 1.0 - clip);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Per-row losses `l(y_i, M(x_i))`.
///
/// Multiclass labels are supported by zero-one loss on integer codes: the loss
/// is 1 exactly when the predicted code differs from the label code.
pub fn compute_losses(dataset: &TabularDataset, spec: &LossSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.kind == LossKind::Precomputed {
        let name = spec.loss_column.as_deref().unwrap_or_default();
        return match dataset.require(name)? {
            Column::Numeric(v) => Ok(v.clone()),
            Column::Categorical(v) => Ok(v.iter().map(|&c| c as f64).collect()),
        };
    }

    let pred_name = spec.prediction_column.as_deref().unwrap_or_default();
    let label_name = spec.label_column.as_deref().unwrap_or_default();
    let pred = dataset.require(pred_name)?;
    let label = dataset.require(label_name)?;

    match spec.kind {
        LossKind::ZeroOne => {
            let p = integer_codes(pred, pred_name)?;
            let y = integer_codes(label, label_name)?;
            Ok(p.iter()
                .zip(&y)
                .map(|(a, b)| if a == b { 0.0 } else { 1.0 })
                .collect())
        }
        LossKind::BinaryCrossEntropy => {
            let p = pred.to_f64();
            let y = label.to_f64();
            p.iter()
                .zip(&y)
                .enumerate()
                .map(|(i, (&p, &y))| {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::Domain(format!(
                            "row {}: prediction {p} outside [0, 1]",
                            i + 1
                        )));
                    }
                    if y != 0.0 && y != 1.0 {
                        return Err(Error::Domain(format!(
                            "row {}: label {y} is not binary",
                            i + 1
                        )));
                    }
                    Ok(binary_cross_entropy(p, y, spec.clip_epsilon))
                })
                .collect()
        }
        LossKind::SquaredError => {
            let p = pred.to_f64();
            let y = label.to_f64();
            Ok(p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).collect())
        }
        LossKind::Precomputed => unreachable!(),
    }
}

/// Declared split of columns into mutable `W`, immutable `Z`, and the
/// remaining dependent columns `V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariablePartition {
    pub mutable_w: Vec<String>,
    #[serde(default)]
    pub immutable_z: Vec<String>,
}

impl VariablePartition {
    pub fn new<S: AsRef<str>>(mutable_w: &[S], immutable_z: &[S]) -> Self {
        Self {
            mutable_w: mutable_w.iter().map(|s| s.as_ref().to_string()).collect(),
            immutable_z: immutable_z.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    /// Checks emptiness and disjointness only; column existence is checked by
    /// [`VariablePartition::validate_against`].
    pub fn validate(&self) -> Result<()> {
        if self.mutable_w.is_empty() {
            return Err(Error::Partition("mutable set W must not be empty".into()));
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (set, names) in [("W", &self.mutable_w), ("Z", &self.immutable_z)] {
            for name in names {
                if let Some(prev) = seen.insert(name, set) {
                    return Err(Error::Partition(if prev == set {
                        format!("column '{name}' listed twice in {set}")
                    } else {
                        format!("column '{name}' is declared in both W and Z")
                    }));
                }
            }
        }
        Ok(())
    }

    pub fn validate_against(&self, schema: &Schema) -> Result<()> {
        self.validate()?;
        for name in self.mutable_w.iter().chain(&self.immutable_z) {
            if !schema.contains_key(name) {
                return Err(Error::Partition(format!("column '{name}' is not in the dataset")));
            }
        }
        Ok(())
    }

    /// Columns that are neither mutable nor immutable.
    pub fn dependent_v(&self, dataset: &TabularDataset) -> Vec<String> {
        dataset
            .column_names()
            .iter()
            .filter(|n| !self.mutable_w.contains(n) && !self.immutable_z.contains(n))
            .cloned()
            .collect()
    }
}

/// Row-to-fold map for cross-fitting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldAssignment {
    pub k_folds: usize,
    pub seed: u64,
    pub fold_id: Vec<usize>,
}

impl FoldAssignment {
    pub fn n(&self) -> usize {
        self.fold_id.len()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_folds];
        for &f in &self.fold_id {
            sizes[f] += 1;
        }
        sizes
    }

    /// Row indices in fold `k`, ascending.
    pub fn in_fold(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_id[i] == k).collect()
    }

    /// Row indices outside fold `k`, ascending.
    pub fn out_of_fold(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_id[i] != k).collect()
    }
}

fn check_fold_count(n: usize, k: usize) -> Result<()> {
    if k < 2 || k > n {
        return Err(Error::Config(format!(
            "fold count must satisfy 2 <= k <= n, got k={k}, n={n}"
        )));
    }
    Ok(())
}

/// Shuffles `0..n` with a seeded generator and cuts the permutation into `k`
/// contiguous chunks whose sizes differ by at most one.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    check_fold_count(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = n / k;
    let extra = n % k;
    let mut fold_id = vec![0; n];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &row in &order[pos..pos + size] {
            fold_id[row] = fold;
        }
        pos += size;
    }
    Ok(FoldAssignment {
        k_folds: k,
        seed,
        fold_id,
    })
}

/// Label-stratified variant: rows are shuffled within each label, the strata
/// are concatenated in label order, and folds are dealt round-robin, so every
/// fold receives its share of a rare label.
pub fn assign_folds_stratified(labels: &[i64], k: usize, seed: u64) -> Result<FoldAssignment> {
    let n = labels.len();
    check_fold_count(n, k)?;
    let mut strata: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        strata.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_id = vec![0; n];
    let mut pos = 0;
    for rows in strata.values_mut() {
        rows.shuffle(&mut rng);
        for &row in rows.iter() {
            fold_id[row] = pos % k;
            pos += 1;
        }
    }
    Ok(FoldAssignment {
        k_folds: k,
        seed,
        fold_id,
    })
}

/// One column of an encoded feature block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EncodedColumn {
    /// Encoded name: the source name, or `source=level` for one-hot columns.
    pub name: String,
    pub source: String,
    /// Category code for one-hot columns.
    pub level: Option<i64>,
}

/// The estimator's input: losses, encoded `W` and `Z` blocks, and folds.
#[derive(Clone, Debug)]
pub struct EvaluationFrame {
    pub losses: Vec<f64>,
    pub w_block: DMatrix<f64>,
    pub z_block: DMatrix<f64>,
    pub w_columns: Vec<EncodedColumn>,
    pub z_columns: Vec<EncodedColumn>,
    pub folds: FoldAssignment,
    pub row_ids: Vec<usize>,
    pub partition: VariablePartition,
    pub source: Arc<TabularDataset>,
}

fn encode_block(
    dataset: &TabularDataset,
    names: &[String],
) -> Result<(DMatrix<f64>, Vec<EncodedColumn>)> {
    let n = dataset.n_rows();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut meta = Vec::new();
    for name in names {
        match dataset.require(name)? {
            Column::Numeric(v) => {
                cols.push(v.clone());
                meta.push(EncodedColumn {
                    name: name.clone(),
                    source: name.clone(),
                    level: None,
                });
            }
            col @ Column::Categorical(v) => {
                for level in col.levels() {
                    cols.push(v.iter().map(|&c| f64::from(u8::from(c == level))).collect());
                    meta.push(EncodedColumn {
                        name: format!("{name}={level}"),
                        source: name.clone(),
                        level: Some(level),
                    });
                }
            }
        }
    }
    let block = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok((block, meta))
}

impl EvaluationFrame {
    pub fn n(&self) -> usize {
        self.losses.len()
    }

    pub fn k_folds(&self) -> usize {
        self.folds.k_folds
    }

    /// `[W | Z]` feature matrix used by the conditional-mean learner.
    pub fn features(&self) -> DMatrix<f64> {
        let n = self.n();
        let pw = self.w_block.ncols();
        let pz = self.z_block.ncols();
        DMatrix::from_fn(n, pw + pz, |i, j| {
            if j < pw {
                self.w_block[(i, j)]
            } else {
                self.z_block[(i, j - pw)]
            }
        })
    }

    /// True when every mutable source column is discrete.
    pub fn w_all_discrete(&self) -> bool {
        self.partition
            .mutable_w
            .iter()
            .all(|n| self.source.column(n).is_some_and(Column::is_discrete))
    }

    /// True when any mutable source column is discrete.
    pub fn w_any_discrete(&self) -> bool {
        self.partition
            .mutable_w
            .iter()
            .any(|n| self.source.column(n).is_some_and(Column::is_discrete))
    }

    /// Builds a frame directly from numeric blocks; columns are named
    /// `w0, w1, ...` and `z0, z1, ...`.
    pub fn from_blocks(
        losses: Vec<f64>,
        w_block: DMatrix<f64>,
        z_block: DMatrix<f64>,
        folds: FoldAssignment,
    ) -> Result<Self> {
        let n = losses.len();
        for (what, rows) in [
            ("w_block", w_block.nrows()),
            ("z_block", z_block.nrows()),
            ("folds", folds.n()),
        ] {
            if rows != n {
                log::debug!("{what} row count mismatch");
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: rows,
                });
            }
        }
        let mut names = Vec::new();
        let mut cols = Vec::new();
        let mut meta_w = Vec::new();
        let mut meta_z = Vec::new();
        for (prefix, block, meta) in [("w", &w_block, &mut meta_w), ("z", &z_block, &mut meta_z)] {
            for j in 0..block.ncols() {
                let name = format!("{prefix}{j}");
                cols.push(Column::Numeric(block.column(j).iter().copied().collect()));
                names.push(name.clone());
                meta.push(EncodedColumn {
                    name: name.clone(),
                    source: name,
                    level: None,
                });
            }
        }
        names.push("loss".into());
        cols.push(Column::Numeric(losses.clone()));
        let source = Arc::new(TabularDataset::new(names, cols)?);
        let partition = VariablePartition {
            mutable_w: meta_w.iter().map(|c| c.name.clone()).collect(),
            immutable_z: meta_z.iter().map(|c| c.name.clone()).collect(),
        };
        let frame = Self {
            losses,
            w_block,
            z_block,
            w_columns: meta_w,
            z_columns: meta_z,
            folds,
            row_ids: (0..n).collect(),
            partition,
            source,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.folds.k_folds < 2 {
            return Err(Error::Config("at least two folds are required".into()));
        }
        if self.folds.n() != n || self.w_block.nrows() != n || self.z_block.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: self.folds.n(),
            });
        }
        if let Some(i) = self.losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::Domain(format!("loss at row {} is not finite", i + 1)));
        }
        let sizes = self.folds.fold_sizes();
        let (lo, hi) = (
            sizes.iter().min().copied().unwrap_or(0),
            sizes.iter().max().copied().unwrap_or(0),
        );
        if hi - lo > 1 {
            return Err(Error::Config(format!(
                "fold sizes must differ by at most one, got {sizes:?}"
            )));
        }
        Ok(())
    }
}

/// Assembles the evaluation frame. Block columns follow declaration order;
/// categorical columns expand to one indicator per level in ascending code order.
pub fn build_frame(
    dataset: Arc<TabularDataset>,
    partition: &VariablePartition,
    losses: Vec<f64>,
    folds: FoldAssignment,
) -> Result<EvaluationFrame> {
    partition.validate_against(&dataset.schema())?;
    if losses.len() != dataset.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: dataset.n_rows(),
            actual: losses.len(),
        });
    }
    let (w_block, w_columns) = encode_block(&dataset, &partition.mutable_w)?;
    let (z_block, z_columns) = encode_block(&dataset, &partition.immutable_z)?;
    let n = dataset.n_rows();
    let frame = EvaluationFrame {
        losses,
        w_block,
        z_block,
        w_columns,
        z_columns,
        folds,
        row_ids: (0..n).collect(),
        partition: partition.clone(),
        source: dataset,
    };
    frame.validate()?;
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema(pairs: &[(&str, ColumnType)]) -> Schema {
        pairs.iter().map(|(n, t)| (n.to_string(), *t)).collect()
    }

    #[test]
    fn parses_three_row_csv() {
        let csv = "a,b\n1,0\n2,1\n3,0";
        let ds = TabularDataset::read_csv(
            csv.as_bytes(),
            &schema(&[("a", ColumnType::Numeric), ("b", ColumnType::Categorical)]),
        )
        .unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.column("a"), Some(&Column::Numeric(vec![1.0, 2.0, 3.0])));
        assert_eq!(ds.column("b"), Some(&Column::Categorical(vec![0, 1, 0])));
    }

    #[test]
    fn extra_column_is_schema_mismatch() {
        let err = TabularDataset::read_csv(
            "a,b\n1,0\n".as_bytes(),
            &schema(&[("a", ColumnType::Numeric)]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
    }

    #[test]
    fn missing_column_is_schema_mismatch() {
        let err = TabularDataset::read_csv(
            "a\n1\n".as_bytes(),
            &schema(&[("a", ColumnType::Numeric), ("b", ColumnType::Numeric)]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
    }

    #[test]
    fn malformed_cell_reports_row_and_column() {
        let err = TabularDataset::read_csv(
            "a,b\n1,0\nx,1\n".as_bytes(),
            &schema(&[("a", ColumnType::Numeric), ("b", ColumnType::Categorical)]),
        )
        .unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_cell_is_rejected() {
        let err = TabularDataset::read_csv(
            "a,b\n1,\n".as_bytes(),
            &schema(&[("a", ColumnType::Numeric), ("b", ColumnType::Numeric)]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let err = TabularDataset::read_csv(
            "a\nNaN\n".as_bytes(),
            &schema(&[("a", ColumnType::Numeric)]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn header_only_is_empty_dataset() {
        let err =
            TabularDataset::read_csv("a\n".as_bytes(), &schema(&[("a", ColumnType::Numeric)]))
                .unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    fn two_col(pred: Column, label: Column) -> TabularDataset {
        TabularDataset::new(vec!["p".into(), "y".into()], vec![pred, label]).unwrap()
    }

    #[test]
    fn zero_one_exact_match_is_zero() {
        let ds = two_col(Column::Categorical(vec![1, 2]), Column::Categorical(vec![1, 0]));
        let spec = LossSpec::from_predictions(LossKind::ZeroOne, "p", "y");
        assert_eq!(compute_losses(&ds, &spec).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_half_is_ln2() {
        let ds = two_col(Column::Numeric(vec![0.5]), Column::Numeric(vec![1.0]));
        let spec = LossSpec::from_predictions(LossKind::BinaryCrossEntropy, "p", "y");
        let l = compute_losses(&ds, &spec).unwrap();
        assert!((l[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_clamps_extremes() {
        let ds = two_col(Column::Numeric(vec![0.0, 1.0]), Column::Numeric(vec![1.0, 1.0]));
        let spec = LossSpec::from_predictions(LossKind::BinaryCrossEntropy, "p", "y");
        let l = compute_losses(&ds, &spec).unwrap();
        assert!((l[0] + 1e-12f64.ln()).abs() < 1e-9);
        assert!(l[1] >= 0.0 && l[1] < 1e-11);
    }

    #[test]
    fn cross_entropy_domain_errors() {
        let spec = LossSpec::from_predictions(LossKind::BinaryCrossEntropy, "p", "y");
        let ds = two_col(Column::Numeric(vec![1.5]), Column::Numeric(vec![1.0]));
        assert!(matches!(compute_losses(&ds, &spec), Err(Error::Domain(_))));
        let ds = two_col(Column::Numeric(vec![0.5]), Column::Numeric(vec![2.0]));
        assert!(matches!(compute_losses(&ds, &spec), Err(Error::Domain(_))));
    }

    #[test]
    fn precomputed_passes_through() {
        let ds = TabularDataset::new(vec!["l".into()], vec![Column::Numeric(vec![0.3, 0.7])])
            .unwrap();
        assert_eq!(
            compute_losses(&ds, &LossSpec::precomputed("l")).unwrap(),
            vec![0.3, 0.7]
        );
    }

    #[test]
    fn loss_spec_requires_exactly_one_source() {
        let mut spec = LossSpec::precomputed("l");
        spec.prediction_column = Some("p".into());
        assert!(spec.validate().is_err());
        let mut spec = LossSpec::from_predictions(LossKind::SquaredError, "p", "y");
        spec.loss_column = Some("l".into());
        assert!(spec.validate().is_err());
        let mut spec = LossSpec::from_predictions(LossKind::SquaredError, "p", "y");
        spec.clip_epsilon = 0.5;
        assert!(spec.validate().is_err());
    }

    fn toy_dataset() -> Arc<TabularDataset> {
        Arc::new(
            TabularDataset::new(
                vec!["x1".into(), "x2".into(), "g".into()],
                vec![
                    Column::Numeric(vec![0.1, 0.2, 0.3, 0.4]),
                    Column::Numeric(vec![1.0, 2.0, 3.0, 4.0]),
                    Column::Categorical(vec![2, 0, 2, 1]),
                ],
            )
            .unwrap(),
        )
    }

    #[test]
    fn frame_with_empty_z() {
        let ds = toy_dataset();
        let p = VariablePartition::new(&["x1", "x2"], &[]);
        let folds = assign_folds(4, 2, 0).unwrap();
        let f = build_frame(ds, &p, vec![0.0; 4], folds).unwrap();
        assert_eq!(f.z_block.ncols(), 0);
        assert_eq!(f.w_block.ncols(), 2);
        assert_eq!(f.w_block[(2, 1)], 3.0);
    }

    #[test]
    fn frame_with_conditional_split() {
        let ds = toy_dataset();
        let p = VariablePartition::new(&["x2"], &["x1"]);
        let f = build_frame(ds, &p, vec![0.0; 4], assign_folds(4, 2, 0).unwrap()).unwrap();
        assert_eq!(f.z_block.column(0).iter().copied().collect::<Vec<_>>(), vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(f.w_block.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn categorical_columns_are_one_hot() {
        let ds = toy_dataset();
        let p = VariablePartition::new(&["g"], &[]);
        let f = build_frame(ds, &p, vec![0.0; 4], assign_folds(4, 2, 0).unwrap()).unwrap();
        let names: Vec<_> = f.w_columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["g=0", "g=1", "g=2"]);
        for i in 0..4 {
            assert_eq!(f.w_block.row(i).sum(), 1.0);
        }
        assert_eq!(f.w_block[(0, 2)], 1.0);
    }

    #[test]
    fn overlapping_partition_names_both() {
        let p = VariablePartition::new(&["x1", "x2"], &["x2"]);
        match p.validate() {
            Err(Error::Partition(msg)) => assert!(msg.contains("x2")),
            other => panic!("unexpected {other:?}"),
        }
        let ds = toy_dataset();
        let err = build_frame(ds, &p, vec![0.0; 4], assign_folds(4, 2, 0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
        assert!(VariablePartition::new::<&str>(&[], &["x1"]).validate().is_err());
    }

    #[test]
    fn dependent_columns_are_the_remainder() {
        let ds = toy_dataset();
        let p = VariablePartition::new(&["x2"], &["x1"]);
        assert_eq!(p.dependent_v(&ds), vec!["g".to_string()]);
    }

    #[test]
    fn folds_of_size_one() {
        let f = assign_folds(10, 10, 3).unwrap();
        assert!(f.fold_sizes().iter().all(|&s| s == 1));
    }

    #[test]
    fn near_equal_folds() {
        let f = assign_folds(10, 3, 3).unwrap();
        let mut s = f.fold_sizes();
        s.sort();
        assert_eq!(s, vec![3, 3, 4]);
    }

    #[test]
    fn folds_are_deterministic() {
        assert_eq!(assign_folds(57, 5, 11).unwrap(), assign_folds(57, 5, 11).unwrap());
        assert_ne!(
            assign_folds(57, 5, 11).unwrap().fold_id,
            assign_folds(57, 5, 12).unwrap().fold_id
        );
    }

    #[test]
    fn bad_fold_counts() {
        assert!(matches!(assign_folds(10, 1, 0), Err(Error::Config(_))));
        assert!(matches!(assign_folds(3, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn stratified_folds_spread_rare_label() {
        let mut labels = vec![0i64; 200];
        for l in labels.iter_mut().take(10) {
            *l = 1;
        }
        let f = assign_folds_stratified(&labels, 5, 1).unwrap();
        for k in 0..5 {
            let pos = f.in_fold(k).iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos, 2);
        }
        let s = f.fold_sizes();
        assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
    }

    proptest! {
        #[test]
        fn folds_partition_rows(n in 2usize..300, k in 2usize..12, seed: u64) {
            prop_assume!(k <= n);
            let f = assign_folds(n, k, seed).unwrap();
            let sizes = f.fold_sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<usize> = (0..k).flat_map(|j| f.in_fold(j)).collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn csv_round_trip(
            xs in proptest::collection::vec(-1e6f64..1e6, 1..40),
            seed in 0i64..1000,
        ) {
            let codes: Vec<i64> = xs.iter().enumerate().map(|(i, _)| (i as i64 * 7 + seed) % 5 - 2).collect();
            let ds = TabularDataset::new(
                vec!["x".into(), "c".into()],
                vec![Column::Numeric(xs.clone()), Column::Categorical(codes)],
            ).unwrap();
            let mut buf = Vec::new();
            ds.write_csv_to(&mut buf).unwrap();
            let back = TabularDataset::read_csv(buf.as_slice(), &ds.schema()).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn builtin_losses_are_bounded(
            p in proptest::collection::vec(0.0f64..=1.0, 1..30),
            bits in proptest::collection::vec(proptest::bool::ANY, 30),
        ) {
            let y: Vec<f64> = p.iter().zip(&bits).map(|(_, &b)| f64::from(u8::from(b))).collect();
            let ds = two_col(Column::Numeric(p.clone()), Column::Numeric(y.clone()));
            let spec = LossSpec::from_predictions(LossKind::BinaryCrossEntropy, "p", "y");
            let bound = -spec.clip_epsilon.ln();
            for l in compute_losses(&ds, &spec).unwrap() {
                prop_assert!(l.is_finite() && (0.0..=bound + 1e-9).contains(&l));
            }
            let codes_p: Vec<i64> = p.iter().map(|x| (x * 3.0) as i64).collect();
            let codes_y: Vec<i64> = y.iter().map(|&x| x as i64).collect();
            let ds = two_col(Column::Categorical(codes_p), Column::Categorical(codes_y));
            let spec = LossSpec::from_predictions(LossKind::ZeroOne, "p", "y");
            for l in compute_losses(&ds, &spec).unwrap() {
                prop_assert!(l == 0.0 || l == 1.0);
            }
        }
    }
}
