//! Datasets: in-memory representation, CSV ingestion driven by a
//! [`DatasetSpec`], the `(y, a)` contingency table, seeded train/test
//! splitting and synthetic fixtures.
//!
//! Ingestion rules:
//! * every field is trimmed before it is interpreted;
//! * row filters run first, then rows with a missing token in any used
//!   column (features, target, protected) are dropped;
//! * numeric features are parsed as `f64`, categorical features are one-hot
//!   encoded against their sorted levels with the first level dropped;
//! * the target maps to `+1` when it satisfies `positive`, `−1` otherwise;
//! * the protected column maps to `a = 0` when it satisfies `protected_zero`.
//!   With `protected_one` set, rows matching neither predicate are excluded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tree::Label;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse { row: usize, column: String, value: String },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("no rows left after filtering")]
    Empty,
    #[error("train fraction {fraction} leaves an empty side for {n} rows")]
    BadFraction { fraction: f64, n: usize },
}

/// A labelled sample `(x, a, y)` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    n_features: usize,
    a: Vec<u8>,
    y: Vec<Label>,
    feature_names: Vec<String>,
}

impl Dataset {
    /// `x` is row-major with `feature_names.len()` columns.
    pub fn new(x: Vec<f64>, a: Vec<u8>, y: Vec<Label>, feature_names: Vec<String>) -> Result<Self, DataError> {
        let p = feature_names.len();
        let n = y.len();
        if a.len() != n {
            return Err(DataError::Inconsistent(format!("{} groups for {n} labels", a.len())));
        }
        if x.len() != n * p {
            return Err(DataError::Inconsistent(format!("{} feature values for {n} rows of {p}", x.len())));
        }
        if let Some(i) = a.iter().position(|&g| g > 1) {
            return Err(DataError::Inconsistent(format!("row {i}: group {} is not 0 or 1", a[i])));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Inconsistent(format!("row {}: non-finite feature value", i / p.max(1))));
        }
        Ok(Self { x, n_features: p, a, y, feature_names })
    }

    pub fn from_rows(rows: &[Vec<f64>], a: Vec<u8>, y: Vec<Label>) -> Result<Self, DataError> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(DataError::Inconsistent("rows have different lengths".into()));
        }
        let names = (0..p).map(|j| format!("x{j}")).collect();
        Self::new(rows.concat(), a, y, names)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |i| self.row(i))
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.n_features + j]
    }

    pub fn groups(&self) -> &[u8] {
        &self.a
    }

    pub fn labels(&self) -> &[Label] {
        &self.y
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            x,
            n_features: self.n_features,
            a: indices.iter().map(|&i| self.a[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Row predicate on a raw (trimmed) CSV field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Eq(String),
    Ne(String),
    In(Vec<String>),
    NotIn(Vec<String>),
    Lt(f64),
    Le(f64),
    Gt(f64),
    Ge(f64),
}

impl Predicate {
    /// Numeric comparisons are false for fields that do not parse.
    pub fn matches(&self, field: &str) -> bool {
        let num = || field.parse::<f64>().ok();
        match self {
            Predicate::Eq(v) => field == v,
            Predicate::Ne(v) => field != v,
            Predicate::In(vs) => vs.iter().any(|v| v == field),
            Predicate::NotIn(vs) => vs.iter().all(|v| v != field),
            Predicate::Lt(t) => num().is_some_and(|x| x < *t),
            Predicate::Le(t) => num().is_some_and(|x| x <= *t),
            Predicate::Gt(t) => num().is_some_and(|x| x > *t),
            Predicate::Ge(t) => num().is_some_and(|x| x >= *t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowFilter {
    pub column: String,
    pub rule: Predicate,
}

fn default_missing_tokens() -> Vec<String> {
    vec![String::new(), "?".into(), "NA".into()]
}

/// How to turn one CSV file into a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub source_path: PathBuf,
    pub target_column: String,
    pub positive: Predicate,
    pub protected_column: String,
    /// Values of the historically discriminated group, encoded `a = 0`.
    pub protected_zero: Predicate,
    #[serde(default)]
    pub protected_one: Option<Predicate>,
    pub features: Vec<FeatureColumn>,
    #[serde(default)]
    pub filters: Vec<RowFilter>,
    #[serde(default = "default_missing_tokens")]
    pub missing_tokens: Vec<String>,
    #[serde(default)]
    pub rows_expected: Option<usize>,
    #[serde(default)]
    pub sha256: Option<String>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(DataError::InvalidSpec(format!("feature `{}` listed twice", f.name)));
            }
        }
        if self.target_column == self.protected_column {
            return Err(DataError::InvalidSpec("target and protected columns coincide".into()));
        }
        for special in [&self.target_column, &self.protected_column] {
            if seen.contains(special.as_str()) {
                return Err(DataError::InvalidSpec(format!("`{special}` cannot also be a feature")));
            }
        }
        if self.features.is_empty() {
            return Err(DataError::InvalidSpec("no feature columns".into()));
        }
        Ok(())
    }

    /// Resolves a relative `source_path` against `base`.
    pub fn resolved(mut self, base: &Path) -> Self {
        if self.source_path.is_relative() {
            self.source_path = base.join(&self.source_path);
        }
        self
    }
}

/// 2×2 table of `(y, a)` counts with column (per-group) percentages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Contingency {
    pub negative_protected: u64,
    pub positive_protected: u64,
    pub negative_nonprotected: u64,
    pub positive_nonprotected: u64,
}

impl Contingency {
    pub fn count(&self, label: Label, group: u8) -> u64 {
        match (label, group) {
            (Label::Negative, 0) => self.negative_protected,
            (Label::Positive, 0) => self.positive_protected,
            (Label::Negative, _) => self.negative_nonprotected,
            (Label::Positive, _) => self.positive_nonprotected,
        }
    }

    pub fn total(&self) -> u64 {
        self.negative_protected + self.positive_protected + self.negative_nonprotected + self.positive_nonprotected
    }

    /// Share of `label` within `group`, in percent.
    pub fn column_percent(&self, label: Label, group: u8) -> Option<f64> {
        let col = self.count(Label::Negative, group) + self.count(Label::Positive, group);
        (col > 0).then(|| 100.0 * self.count(label, group) as f64 / col as f64)
    }
}

pub fn contingency(dataset: &Dataset) -> Contingency {
    let mut t = Contingency::default();
    for (&y, &a) in dataset.labels().iter().zip(dataset.groups()) {
        let cell = match (y, a) {
            (Label::Negative, 0) => &mut t.negative_protected,
            (Label::Positive, 0) => &mut t.positive_protected,
            (Label::Negative, _) => &mut t.negative_nonprotected,
            (Label::Positive, _) => &mut t.positive_nonprotected,
        };
        *cell += 1;
    }
    t
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContingencyReport {
    pub counts: Contingency,
    /// `[label][group]`, label `-1` first.
    pub column_percent: [[Option<f64>; 2]; 2],
}

impl From<Contingency> for ContingencyReport {
    fn from(counts: Contingency) -> Self {
        let pct = |l, g| counts.column_percent(l, g);
        Self {
            counts,
            column_percent: [
                [pct(Label::Negative, 0), pct(Label::Negative, 1)],
                [pct(Label::Positive, 0), pct(Label::Positive, 1)],
            ],
        }
    }
}

/// Everything worth knowing about one ingestion run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadReport {
    pub dataset: String,
    pub source_path: String,
    pub sha256: String,
    pub checksum_matches: Option<bool>,
    pub rows_read: usize,
    pub rows_filtered: usize,
    pub rows_missing: usize,
    pub rows_loaded: usize,
    pub rows_expected: Option<usize>,
    pub contingency: ContingencyReport,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_owned(), source })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

enum Cell {
    Num(f64),
    Cat(String),
}

/// Loads and encodes the CSV described by `spec`.
pub fn load(spec: &DatasetSpec) -> Result<(Dataset, LoadReport), DataError> {
    spec.validate()?;
    let path = &spec.source_path;
    let sha256 = sha256_file(path)?;
    let csv_err = |source| DataError::Csv { path: path.clone(), source };
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let index_of =
        |name: &str| header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.to_owned()));
    let target = index_of(&spec.target_column)?;
    let protected = index_of(&spec.protected_column)?;
    let feature_idx: Vec<usize> = spec.features.iter().map(|f| index_of(&f.name)).collect::<Result<_, _>>()?;
    let filters: Vec<(usize, &Predicate)> =
        spec.filters.iter().map(|f| Ok((index_of(&f.column)?, &f.rule))).collect::<Result<_, DataError>>()?;
    let used: Vec<usize> = feature_idx.iter().copied().chain([target, protected]).collect();

    let mut rows_read = 0;
    let mut rows_filtered = 0;
    let mut rows_missing = 0;
    let mut cells: Vec<Vec<Cell>> = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        rows_read += 1;
        let field = |i: usize| record.get(i).unwrap_or("");
        if !filters.iter().all(|(i, rule)| rule.matches(field(*i))) {
            rows_filtered += 1;
            continue;
        }
        let group = if spec.protected_zero.matches(field(protected)) {
            0
        } else if spec.protected_one.as_ref().is_none_or(|p| p.matches(field(protected))) {
            1
        } else {
            rows_filtered += 1;
            continue;
        };
        if used.iter().any(|&i| spec.missing_tokens.iter().any(|m| m == field(i))) {
            rows_missing += 1;
            continue;
        }
        let mut row = Vec::with_capacity(feature_idx.len());
        for (col, &i) in spec.features.iter().zip(&feature_idx) {
            row.push(match col.kind {
                FeatureKind::Numeric => {
                    let raw = field(i);
                    let v: f64 = raw.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| DataError::Parse {
                        row: line + 1,
                        column: col.name.clone(),
                        value: raw.to_owned(),
                    })?;
                    Cell::Num(v)
                }
                FeatureKind::Categorical => Cell::Cat(field(i).to_owned()),
            });
        }
        cells.push(row);
        a.push(group);
        y.push(if spec.positive.matches(field(target)) { Label::Positive } else { Label::Negative });
    }
    if cells.is_empty() {
        return Err(DataError::Empty);
    }

    // one-hot layout: sorted levels, first dropped
    let mut levels: Vec<Vec<String>> = vec![Vec::new(); spec.features.len()];
    for (k, col) in spec.features.iter().enumerate() {
        if col.kind == FeatureKind::Categorical {
            let set: BTreeSet<&str> = cells
                .iter()
                .map(|r| match &r[k] {
                    Cell::Cat(s) => s.as_str(),
                    Cell::Num(_) => unreachable!(),
                })
                .collect();
            levels[k] = set.into_iter().skip(1).map(str::to_owned).collect();
        }
    }
    let mut names = Vec::new();
    for (k, col) in spec.features.iter().enumerate() {
        match col.kind {
            FeatureKind::Numeric => names.push(col.name.clone()),
            FeatureKind::Categorical => names.extend(levels[k].iter().map(|l| format!("{}={l}", col.name))),
        }
    }
    let lookup: Vec<BTreeMap<&str, usize>> =
        levels.iter().map(|ls| ls.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()).collect();
    let mut x = Vec::with_capacity(cells.len() * names.len());
    for row in &cells {
        for (k, cell) in row.iter().enumerate() {
            match cell {
                Cell::Num(v) => x.push(*v),
                Cell::Cat(s) => {
                    let start = x.len();
                    x.extend(std::iter::repeat_n(0.0, levels[k].len()));
                    if let Some(&i) = lookup[k].get(s.as_str()) {
                        x[start + i] = 1.0;
                    }
                }
            }
        }
    }
    let dataset = Dataset::new(x, a, y, names.clone())?;

    let mut warnings = Vec::new();
    if let Some(expected) = spec.rows_expected {
        let delta = dataset.len() as f64 - expected as f64;
        if delta.abs() > 0.01 * expected as f64 {
            warnings.push(format!(
                "{} rows loaded, {expected} expected ({:+.2}%)",
                dataset.len(),
                100.0 * delta / expected as f64
            ));
        }
    }
    let checksum_matches = spec.sha256.as_ref().map(|want| want.eq_ignore_ascii_case(&sha256));
    if checksum_matches == Some(false) {
        warnings.push(format!("checksum {sha256} differs from the pinned {}", spec.sha256.as_deref().unwrap_or("")));
    }
    for w in &warnings {
        warn!("{}: {w}", spec.name);
    }
    info!(
        "{}: read {rows_read}, filtered {rows_filtered}, dropped {rows_missing} with missing values, kept {}",
        spec.name,
        dataset.len()
    );
    let report = LoadReport {
        dataset: spec.name.clone(),
        source_path: path.display().to_string(),
        sha256,
        checksum_matches,
        rows_read,
        rows_filtered,
        rows_missing,
        rows_loaded: dataset.len(),
        rows_expected: spec.rows_expected,
        contingency: contingency(&dataset).into(),
        n_features: names.len(),
        feature_names: names,
        warnings,
    };
    Ok((dataset, report))
}

/// Number of training rows for a split; a tiny epsilon keeps products like
/// `0.7 × 10` from flooring to 6.
fn train_size(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Seeded uniform permutation; the first `⌊fraction·n⌋` rows train.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let (train, test) = split_indices(dataset.len(), train_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    let bad = || DataError::BadFraction { fraction: train_fraction, n };
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(bad());
    }
    let n_train = train_size(train_fraction, n);
    if n_train == 0 || n_train >= n {
        return Err(bad());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train);
    Ok((order, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SyntheticKind {
    /// Two standard-normal features drawn independently of `a`.
    Independent,
    /// Feature 0 has correlation `rho` with `a`; feature 1 is independent.
    Biased { rho: f64 },
}

/// Reproducible fixture with two features.
///
/// `a` is an exactly balanced group assignment in random order,
/// `y = sign(x₀ + x₁ + ε)` with `ε ~ N(0, 0.5²)`. For the biased kind
/// `x₀ = ρ·s + √(1−ρ²)·e` where `s = 2a − 1`, which gives `corr(x₀, a) = ρ`.
/// If one class is absent (possible for tiny `n`), the row with the smallest
/// margin is relabelled.
pub fn synthesize(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n < 4 {
        return Err(DataError::Inconsistent(format!("synthetic datasets need at least 4 rows, got {n}")));
    }
    let rho = match kind {
        SyntheticKind::Independent => 0.0,
        SyntheticKind::Biased { rho } if (-1.0..=1.0).contains(&rho) => rho,
        SyntheticKind::Biased { rho } => {
            return Err(DataError::Inconsistent(format!("correlation {rho} outside [-1, 1]")));
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    a.shuffle(&mut rng);
    let mut x = Vec::with_capacity(2 * n);
    let mut margins = Vec::with_capacity(n);
    for &g in &a {
        let e: f64 = StandardNormal.sample(&mut rng);
        let x0 = match kind {
            SyntheticKind::Independent => e,
            SyntheticKind::Biased { .. } => rho * (2.0 * f64::from(g) - 1.0) + (1.0 - rho * rho).sqrt() * e,
        };
        let x1: f64 = StandardNormal.sample(&mut rng);
        let noise: f64 = StandardNormal.sample(&mut rng);
        let noise = 0.5 * noise;
        x.extend([x0, x1]);
        margins.push(x0 + x1 + noise);
    }
    let mut y: Vec<Label> = margins.iter().map(|&m| if m > 0.0 { Label::Positive } else { Label::Negative }).collect();
    for class in [Label::Positive, Label::Negative] {
        if !y.contains(&class) {
            let i = (0..n).min_by(|&i, &j| margins[i].abs().total_cmp(&margins[j].abs())).expect("n >= 4");
            y[i] = class;
        }
    }
    Dataset::new(x, a, y, vec!["x0".into(), "x1".into()])
}
