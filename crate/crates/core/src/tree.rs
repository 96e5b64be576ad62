//! Binary decision trees with univariate linear tests.
//!
//! Every decision node carries a test `I(0 < θ₀ + θ₁·x_j)`. A case for which
//! the test is true continues in the left child, otherwise in the right one.
//! A margin of exactly zero therefore routes right.
//!
//! Besides plain evaluation the tree exposes the region semantics used by the
//! fairness analysis: the membership indicator of a node's domain, the branch
//! rooted at a node, and the extended test that yields [`ExtendedTestValue::Alpha`]
//! outside the node's domain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a node inside a [`DecisionTree`] arena.
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("input has {got} features, tree expects {expected}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("feature {index} is not finite")]
    NonFinite { index: usize },
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("node {0} is a leaf, a decision node is required")]
    NotDecision(NodeId),
    #[error("invalid split test: {0}")]
    InvalidTest(String),
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error("tree json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Binary class label, `-1` or `+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_sign(value: i64) -> Option<Self> {
        match value {
            -1 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn value(self) -> i8 {
        match self {
            Label::Negative => -1,
            Label::Positive => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.value())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_sign(v).ok_or_else(|| serde::de::Error::custom(format!("label must be -1 or 1, got {v}")))
    }
}

/// Value of the extended test `I*_t`: the node test inside the node's domain,
/// a sentinel distinct from both outcomes outside of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExtendedTestValue {
    Zero,
    One,
    Alpha,
}

impl From<bool> for ExtendedTestValue {
    fn from(passed: bool) -> Self {
        if passed {
            ExtendedTestValue::One
        } else {
            ExtendedTestValue::Zero
        }
    }
}

/// Univariate linear test `I(0 < θ₀ + θ₁·x_feature)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitTest {
    feature: usize,
    theta: [f64; 2],
}

impl SplitTest {
    /// Rejects non-finite parameters and the all-zero test, which would send
    /// every case to the same child.
    pub fn new(feature: usize, theta: [f64; 2]) -> Result<Self, TreeError> {
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(TreeError::InvalidTest(format!("non-finite theta {theta:?}")));
        }
        if theta == [0.0, 0.0] {
            return Err(TreeError::InvalidTest("theta is (0, 0)".into()));
        }
        Ok(Self { feature, theta })
    }

    /// The threshold form `I(x_j < r)` expressed as a linear test.
    pub fn less_than(feature: usize, threshold: f64) -> Result<Self, TreeError> {
        Self::new(feature, [threshold, -1.0])
    }

    pub fn feature(&self) -> usize {
        self.feature
    }

    pub fn theta(&self) -> [f64; 2] {
        self.theta
    }

    /// Signed distance `θ₀ + θ₁·v` for a single feature value.
    pub fn margin_at(&self, value: f64) -> f64 {
        self.theta[0] + self.theta[1] * value
    }

    pub fn passes_value(&self, value: f64) -> bool {
        0.0 < self.margin_at(value)
    }

    /// `x` must have at least `feature + 1` coordinates.
    pub fn passes(&self, x: &[f64]) -> bool {
        self.passes_value(x[self.feature])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Decision { test: SplitTest, left: NodeId, right: NodeId },
    Leaf { label: Label },
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }
}

/// Arena-backed binary tree. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    root: NodeId,
    n_features: usize,
    parents: Vec<Option<NodeId>>,
}

impl DecisionTree {
    /// Validates that `nodes` form a rooted binary tree reachable from
    /// `root`: no shared children, no cycles, no orphans, and every test
    /// reads a feature below `n_features`.
    pub fn new(nodes: Vec<Node>, root: NodeId, n_features: usize) -> Result<Self, TreeError> {
        if root >= nodes.len() {
            return Err(TreeError::Malformed(format!("root {root} out of range")));
        }
        let mut parents: Vec<Option<NodeId>> = vec![None; nodes.len()];
        let mut seen = vec![false; nodes.len()];
        seen[root] = true;
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if let Node::Decision { test, left, right } = &nodes[id] {
                if test.feature >= n_features {
                    return Err(TreeError::Malformed(format!(
                        "node {id} tests feature {} but the tree has {n_features} features",
                        test.feature
                    )));
                }
                for &child in [left, right] {
                    if child >= nodes.len() {
                        return Err(TreeError::Malformed(format!("node {id} points to missing node {child}")));
                    }
                    if seen[child] {
                        return Err(TreeError::Malformed(format!("node {child} is reached twice")));
                    }
                    seen[child] = true;
                    parents[child] = Some(id);
                    stack.push(child);
                }
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(TreeError::Malformed(format!("node {orphan} is not reachable from the root")));
        }
        Ok(Self { nodes, root, n_features, parents })
    }

    pub fn leaf(label: Label, n_features: usize) -> Self {
        Self { nodes: vec![Node::Leaf { label }], root: 0, n_features, parents: vec![None] }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, TreeError> {
        self.nodes.get(id).ok_or(TreeError::UnknownNode(id))
    }

    pub fn parent(&self, id: NodeId) -> Result<Option<NodeId>, TreeError> {
        self.parents.get(id).copied().ok_or(TreeError::UnknownNode(id))
    }

    /// True iff the tree is a single leaf.
    pub fn is_constant(&self) -> bool {
        self.nodes[self.root].is_leaf()
    }

    /// The terminal nodes, in arena order.
    pub fn terminal_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&id| self.nodes[id].is_leaf()).collect()
    }

    pub fn decision_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&id| !self.nodes[id].is_leaf()).collect()
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(tree: &DecisionTree, id: NodeId) -> usize {
            match &tree.nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Decision { left, right, .. } => 1 + walk(tree, *left).max(walk(tree, *right)),
            }
        }
        walk(self, self.root)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), TreeError> {
        if x.len() != self.n_features {
            return Err(TreeError::ArityMismatch { expected: self.n_features, got: x.len() });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(TreeError::NonFinite { index });
        }
        Ok(())
    }

    /// Leaf reached by `x`, without input validation.
    pub(crate) fn leaf_of(&self, x: &[f64]) -> NodeId {
        let mut id = self.root;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Decision { test, left, right } => {
                    id = if test.passes(x) { *left } else { *right };
                }
            }
        }
    }

    fn label_of(&self, leaf: NodeId) -> Label {
        match self.nodes[leaf] {
            Node::Leaf { label } => label,
            Node::Decision { .. } => unreachable!("leaf_of always stops at a leaf"),
        }
    }

    /// Evaluates the tree on `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<Label, TreeError> {
        self.check_input(x)?;
        Ok(self.label_of(self.leaf_of(x)))
    }

    pub fn predict_rows<'a, I>(&self, rows: I) -> Result<Vec<Label>, TreeError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        rows.into_iter().map(|x| self.evaluate(x)).collect()
    }

    /// Nodes visited by `x`, root first.
    pub fn path(&self, x: &[f64]) -> Result<Vec<NodeId>, TreeError> {
        self.check_input(x)?;
        let mut out = vec![self.root];
        let mut id = self.root;
        while let Node::Decision { test, left, right } = &self.nodes[id] {
            id = if test.passes(x) { *left } else { *right };
            out.push(id);
        }
        Ok(out)
    }

    /// Ancestors of `node` from the root down, excluding `node`.
    fn ancestry(&self, node: NodeId) -> Vec<NodeId> {
        let mut chain = Vec::new();
        let mut cur = node;
        while let Some(p) = self.parents[cur] {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    /// `dom_{T_t}(x)`: whether the evaluation of `x` passes through `node`.
    ///
    /// Computed by replaying each ancestor's test: a left child requires the
    /// parent's test to hold, a right child requires it to fail.
    pub fn node_domain_indicator(&self, node: NodeId, x: &[f64]) -> Result<bool, TreeError> {
        if node >= self.nodes.len() {
            return Err(TreeError::UnknownNode(node));
        }
        self.check_input(x)?;
        Ok(self.in_domain(node, x))
    }

    pub(crate) fn in_domain(&self, node: NodeId, x: &[f64]) -> bool {
        let chain = self.ancestry(node);
        chain.iter().enumerate().all(|(k, &anc)| {
            let child = chain.get(k + 1).copied().unwrap_or(node);
            match &self.nodes[anc] {
                Node::Decision { test, left, .. } => test.passes(x) == (child == *left),
                Node::Leaf { .. } => unreachable!("ancestors are decision nodes"),
            }
        })
    }

    /// `I*_t(x)`.
    pub fn extended_test(&self, node: NodeId, x: &[f64]) -> Result<ExtendedTestValue, TreeError> {
        let test = match self.node(node)? {
            Node::Decision { test, .. } => *test,
            Node::Leaf { .. } => return Err(TreeError::NotDecision(node)),
        };
        self.check_input(x)?;
        if !self.in_domain(node, x) {
            return Ok(ExtendedTestValue::Alpha);
        }
        Ok(test.passes(x).into())
    }

    /// The branch `T_t`: `node` and its descendants as a standalone tree.
    /// Ids are renumbered in pre-order starting at 0.
    pub fn branch(&self, node: NodeId) -> Result<DecisionTree, TreeError> {
        if node >= self.nodes.len() {
            return Err(TreeError::UnknownNode(node));
        }
        fn copy(src: &DecisionTree, id: NodeId, out: &mut Vec<Node>) -> NodeId {
            let slot = out.len();
            match &src.nodes[id] {
                Node::Leaf { label } => out.push(Node::Leaf { label: *label }),
                Node::Decision { test, left, right } => {
                    out.push(Node::Leaf { label: Label::Negative });
                    let l = copy(src, *left, out);
                    let r = copy(src, *right, out);
                    out[slot] = Node::Decision { test: *test, left: l, right: r };
                }
            }
            slot
        }
        let mut nodes = Vec::new();
        copy(self, node, &mut nodes);
        DecisionTree::new(nodes, 0, self.n_features)
    }

    pub fn to_document(&self) -> TreeDocument {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| match node {
                Node::Leaf { label } => NodeRecord {
                    id,
                    kind: NodeKind::Leaf,
                    feature: None,
                    theta: None,
                    left: None,
                    right: None,
                    label: Some(*label),
                },
                Node::Decision { test, left, right } => NodeRecord {
                    id,
                    kind: NodeKind::Decision,
                    feature: Some(test.feature),
                    theta: Some(test.theta),
                    left: Some(*left),
                    right: Some(*right),
                    label: None,
                },
            })
            .collect();
        TreeDocument { root: self.root, n_features: self.n_features, nodes }
    }

    pub fn from_document(doc: TreeDocument) -> Result<Self, TreeError> {
        let n = doc.nodes.len();
        let mut slots: Vec<Option<Node>> = vec![None; n];
        for rec in doc.nodes {
            if rec.id >= n || slots[rec.id].is_some() {
                return Err(TreeError::Malformed(format!("node ids must be unique and dense, bad id {}", rec.id)));
            }
            let missing = |field: &str| TreeError::Malformed(format!("node {} lacks `{field}`", rec.id));
            let node = match rec.kind {
                NodeKind::Leaf => Node::Leaf { label: rec.label.ok_or_else(|| missing("label"))? },
                NodeKind::Decision => Node::Decision {
                    test: SplitTest::new(
                        rec.feature.ok_or_else(|| missing("feature"))?,
                        rec.theta.ok_or_else(|| missing("theta"))?,
                    )?,
                    left: rec.left.ok_or_else(|| missing("left"))?,
                    right: rec.right.ok_or_else(|| missing("right"))?,
                },
            };
            slots[rec.id] = Some(node);
        }
        let nodes = slots.into_iter().map(|s| s.expect("every slot filled")).collect();
        DecisionTree::new(nodes, doc.root, doc.n_features)
    }

    /// Pretty-printed JSON. `f64` values are written in shortest round-trip
    /// form, so parsing the output restores every `θ` bit for bit.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("tree document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Decision,
    Leaf,
}

/// One entry of the `nodes` array in the tree JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

/// Serialized form: `{root, n_features, nodes: [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub root: NodeId,
    pub n_features: usize,
    pub nodes: Vec<NodeRecord>,
}
