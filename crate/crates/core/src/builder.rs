//! Greedy top-down growth of constrained logistic regression trees.
//!
//! At every node each feature gets its own one-dimensional logistic fit under
//! the covariance bound `c`. The fit whose hard predictions (`+1` iff the
//! margin is positive) make the fewest training errors becomes the node test.
//! Its `true` side is the left child. With an unbounded `c` the same procedure
//! yields an unconstrained logistic regression tree.

use std::fmt;
use std::str::FromStr;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::data::Dataset;
use crate::solver::{fit_constrained, fit_unconstrained, ClrFit, FeatureSample, NodeFeatureData, SolverOptions};
use crate::tree::{DecisionTree, Label, Node, NodeId, SplitTest, TreeError};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid growth configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot grow a tree on an empty dataset")]
    EmptyData,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Bound on the covariance between the logit and the protected attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceBound {
    Finite(f64),
    Unbounded,
}

impl CovarianceBound {
    pub fn value(self) -> f64 {
        match self {
            CovarianceBound::Finite(c) => c,
            CovarianceBound::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_unbounded(self) -> bool {
        self == CovarianceBound::Unbounded
    }

    fn validate(self) -> Result<(), String> {
        match self {
            CovarianceBound::Finite(c) if !(c.is_finite() && c > 0.0) => {
                Err(format!("covariance bound must be positive and finite, got {c}"))
            }
            _ => Ok(()),
        }
    }
}

impl From<f64> for CovarianceBound {
    fn from(c: f64) -> Self {
        if c == f64::INFINITY {
            CovarianceBound::Unbounded
        } else {
            CovarianceBound::Finite(c)
        }
    }
}

impl fmt::Display for CovarianceBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovarianceBound::Finite(c) => write!(f, "{c}"),
            CovarianceBound::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for CovarianceBound {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if ["inf", "infinity", "+inf"].iter().any(|t| s.eq_ignore_ascii_case(t)) {
            return Ok(CovarianceBound::Unbounded);
        }
        let c: f64 = s.parse().map_err(|_| format!("`{s}` is neither a number nor `inf`"))?;
        let bound = CovarianceBound::from(c);
        bound.validate()?;
        Ok(bound)
    }
}

impl Serialize for CovarianceBound {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CovarianceBound::Finite(c) => s.serialize_f64(*c),
            CovarianceBound::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for CovarianceBound {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let bound = match Repr::deserialize(d)? {
            Repr::Num(c) => CovarianceBound::from(c),
            Repr::Text(t) => return t.parse().map_err(serde::de::Error::custom),
        };
        bound.validate().map_err(serde::de::Error::custom)?;
        Ok(bound)
    }
}

fn default_max_depth() -> usize {
    5
}

fn default_min_samples_split() -> usize {
    20
}

fn default_min_samples_leaf() -> usize {
    10
}

/// Stopping rules shared by every bound in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthLimits {
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "default_min_samples_split")]
    pub min_samples_split: usize,
    #[serde(default = "default_min_samples_leaf")]
    pub min_samples_leaf: usize,
    /// Drop candidates whose solver did not converge instead of using them.
    #[serde(default)]
    pub reject_unconverged: bool,
}

impl Default for GrowthLimits {
    fn default() -> Self {
        Self {
            max_depth: default_max_depth(),
            min_samples_split: default_min_samples_split(),
            min_samples_leaf: default_min_samples_leaf(),
            reject_unconverged: false,
        }
    }
}

impl GrowthLimits {
    pub fn with_bound(self, c: CovarianceBound) -> GrowthConfig {
        GrowthConfig {
            c,
            max_depth: self.max_depth,
            min_samples_split: self.min_samples_split,
            min_samples_leaf: self.min_samples_leaf,
            reject_unconverged: self.reject_unconverged,
        }
    }
}

/// Stopping rules and the covariance bound used while growing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthConfig {
    pub c: CovarianceBound,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub reject_unconverged: bool,
}

impl GrowthConfig {
    pub fn new(c: CovarianceBound) -> Self {
        GrowthLimits::default().with_bound(c)
    }

    pub fn validate(&self) -> Result<(), BuildError> {
        self.c.validate().map_err(BuildError::InvalidConfig)?;
        if self.min_samples_split < 2 {
            return Err(BuildError::InvalidConfig("min_samples_split must be at least 2".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(BuildError::InvalidConfig("min_samples_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

/// The rows of a dataset that reach one node.
#[derive(Debug, Clone)]
pub struct NodeDataset<'a> {
    data: &'a Dataset,
    rows: Vec<usize>,
}

impl<'a> NodeDataset<'a> {
    pub fn root(data: &'a Dataset) -> Self {
        Self { data, rows: (0..data.len()).collect() }
    }

    pub fn new(data: &'a Dataset, rows: Vec<usize>) -> Self {
        Self { data, rows }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Majority label, ties going to `−1`.
    pub fn majority(&self) -> Label {
        let pos = self.rows.iter().filter(|&&i| self.data.labels()[i].is_positive()).count();
        if 2 * pos > self.rows.len() {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_pure(&self) -> bool {
        let labels = self.data.labels();
        self.rows.split_first().is_none_or(|(&first, rest)| rest.iter().all(|&i| labels[i] == labels[first]))
    }

    pub fn feature_data(&self, feature: usize) -> NodeFeatureData {
        let samples = self
            .rows
            .iter()
            .map(|&i| FeatureSample {
                x: self.data.value(i, feature),
                a: self.data.groups()[i],
                y: self.data.labels()[i],
            })
            .collect();
        NodeFeatureData::new(samples).expect("dataset rows are validated on construction")
    }
}

/// The winning test at a node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitChoice {
    pub feature: usize,
    pub theta: [f64; 2],
    pub error_count: usize,
    pub n_left: usize,
    pub n_right: usize,
    pub fit: ClrFit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub fits: usize,
    pub unconverged: usize,
}

impl std::ops::AddAssign for SplitStats {
    fn add_assign(&mut self, rhs: Self) {
        self.fits += rhs.fits;
        self.unconverged += rhs.unconverged;
    }
}

fn fit_feature(data: &NodeFeatureData, c: CovarianceBound, opts: &SolverOptions) -> ClrFit {
    match c {
        CovarianceBound::Unbounded => fit_unconstrained(data, opts),
        CovarianceBound::Finite(c) => fit_constrained(data, c, opts).expect("bound validated by GrowthConfig"),
    }
}

/// Picks the best per-feature constrained fit at a node, or `None` when no
/// feature yields a valid split (both sides holding at least
/// `min_samples_leaf` rows). Error ties go to the smallest feature index.
pub fn clrt_split(
    node: &NodeDataset<'_>,
    config: &GrowthConfig,
    opts: &SolverOptions,
) -> (Option<SplitChoice>, SplitStats) {
    let min_side = config.min_samples_leaf.max(1);
    let candidates: Vec<(Option<SplitChoice>, bool)> = (0..node.data.n_features())
        .into_par_iter()
        .map(|feature| {
            let samples = node.feature_data(feature);
            let fit = fit_feature(&samples, config.c, opts);
            let converged = fit.converged;
            if config.reject_unconverged && !converged {
                return (None, false);
            }
            let Ok(test) = SplitTest::new(feature, fit.theta) else {
                return (None, converged);
            };
            let mut n_left = 0;
            let mut errors = 0;
            for s in samples.rows() {
                let goes_left = test.passes_value(s.x);
                n_left += usize::from(goes_left);
                errors += usize::from(goes_left != s.y.is_positive());
            }
            let n_right = samples.len() - n_left;
            if n_left < min_side || n_right < min_side {
                return (None, converged);
            }
            let choice = SplitChoice { feature, theta: fit.theta, error_count: errors, n_left, n_right, fit };
            (Some(choice), converged)
        })
        .collect();

    let stats = SplitStats { fits: candidates.len(), unconverged: candidates.iter().filter(|(_, ok)| !ok).count() };
    // strict `<` keeps the first (smallest) feature among equal error counts
    let mut best: Option<SplitChoice> = None;
    for choice in candidates.into_iter().filter_map(|(c, _)| c) {
        if best.as_ref().is_none_or(|b| choice.error_count < b.error_count) {
            best = Some(choice);
        }
    }
    (best, stats)
}

/// A grown tree plus solver bookkeeping.
#[derive(Debug, Clone)]
pub struct GrowReport {
    pub tree: DecisionTree,
    pub stats: SplitStats,
}

/// Grows a tree on `data`.
pub fn grow(data: &Dataset, config: &GrowthConfig, opts: &SolverOptions) -> Result<DecisionTree, BuildError> {
    grow_with_report(data, config, opts).map(|r| r.tree)
}

pub fn grow_with_report(data: &Dataset, config: &GrowthConfig, opts: &SolverOptions) -> Result<GrowReport, BuildError> {
    config.validate()?;
    if data.is_empty() {
        return Err(BuildError::EmptyData);
    }
    let mut nodes = Vec::new();
    let mut stats = SplitStats::default();
    grow_node(NodeDataset::root(data), 0, config, opts, &mut nodes, &mut stats);
    if stats.unconverged > 0 {
        debug!("{} of {} fits stopped before convergence", stats.unconverged, stats.fits);
    }
    let tree = DecisionTree::new(nodes, 0, data.n_features())?;
    Ok(GrowReport { tree, stats })
}

fn grow_node(
    node: NodeDataset<'_>,
    depth: usize,
    config: &GrowthConfig,
    opts: &SolverOptions,
    nodes: &mut Vec<Node>,
    stats: &mut SplitStats,
) -> NodeId {
    let id = nodes.len();
    let leaf = Node::Leaf { label: node.majority() };
    if depth >= config.max_depth || node.len() < config.min_samples_split || node.is_pure() {
        nodes.push(leaf);
        return id;
    }
    let (choice, s) = clrt_split(&node, config, opts);
    *stats += s;
    let Some(choice) = choice else {
        nodes.push(leaf);
        return id;
    };
    let test = SplitTest::new(choice.feature, choice.theta).expect("validated in clrt_split");
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        node.rows.iter().partition(|&&i| test.passes_value(node.data.value(i, choice.feature)));
    // placeholder, patched once both children have ids
    nodes.push(leaf);
    let left = grow_node(NodeDataset::new(node.data, left_rows), depth + 1, config, opts, nodes, stats);
    let right = grow_node(NodeDataset::new(node.data, right_rows), depth + 1, config, opts, nodes, stats);
    nodes[id] = Node::Decision { test, left, right };
    id
}

/// True when every input maps to the same label.
pub fn is_constant_tree(tree: &DecisionTree) -> bool {
    tree.is_constant()
}
