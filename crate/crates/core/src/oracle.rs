//! Exact checks of statistical parity, local parity and the per-node test
//! hypothesis on finite joint distributions of `(X, A)`.
//!
//! Probabilities are [`BigRational`]s and tree tests are evaluated exactly by
//! converting `θ` to rationals, so every check is an equality test with no
//! tolerance. The module also generates random instances and counts how often
//! the two implications (terminal local parity ⇒ parity, test hypothesis ⇒
//! local parity everywhere and parity) hold.

use std::collections::BTreeSet;

use num::{BigInt, BigRational, One, Signed, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::tree::{DecisionTree, Label, Node, NodeId, SplitTest, TreeError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("group a={0} has probability zero")]
    DegenerateGroup(u8),
    #[error("tree uses {tree} features, distribution has {dist}")]
    FeatureMismatch { tree: usize, dist: usize },
    #[error("node {0} is not a decision node")]
    NotDecision(NodeId),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

pub type Rational = BigRational;

pub fn rational(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Atom {
    #[serde(serialize_with = "ser_vec")]
    pub x: Vec<Rational>,
    pub a: u8,
    #[serde(serialize_with = "ser_one")]
    pub prob: Rational,
}

fn ser_one<S: serde::Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&r.to_string())
}

fn ser_vec<S: serde::Serializer>(v: &[Rational], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(ToString::to_string))
}

/// Finitely supported law of `(X, A)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteJointDistribution {
    atoms: Vec<Atom>,
    n_features: usize,
}

impl FiniteJointDistribution {
    pub fn new(atoms: Vec<Atom>) -> Result<Self, OracleError> {
        let bad = |m: String| Err(OracleError::InvalidDistribution(m));
        let Some(first) = atoms.first() else {
            return bad("no atoms".into());
        };
        let p = first.x.len();
        let mut total = Rational::zero();
        let mut seen = BTreeSet::new();
        for (i, atom) in atoms.iter().enumerate() {
            if atom.x.len() != p {
                return bad(format!("atom {i} has {} coordinates, expected {p}", atom.x.len()));
            }
            if atom.a > 1 {
                return bad(format!("atom {i} has group {}", atom.a));
            }
            if !atom.prob.is_positive() {
                return bad(format!("atom {i} has non-positive probability {}", atom.prob));
            }
            if !seen.insert((atom.x.clone(), atom.a)) {
                return bad(format!("atom {i} repeats an earlier (x, a) pair"));
            }
            total += &atom.prob;
        }
        if !total.is_one() {
            return bad(format!("probabilities sum to {total}"));
        }
        Ok(Self { atoms, n_features: p })
    }

    /// Builds `P(x, a) = P(x)·P(a)`.
    pub fn product(xs: &[(Vec<Rational>, Rational)], pa0: Rational) -> Result<Self, OracleError> {
        let pa1 = Rational::one() - &pa0;
        let atoms = xs
            .iter()
            .flat_map(|(x, px)| {
                [(0, &pa0), (1, &pa1)].into_iter().map(move |(a, pa)| Atom { x: x.clone(), a, prob: px * pa })
            })
            .filter(|atom| atom.prob.is_positive())
            .collect();
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn prob_group(&self, a: u8) -> Rational {
        self.atoms.iter().filter(|at| at.a == a).map(|at| at.prob.clone()).sum()
    }

    /// Whether `X ⊥ A` exactly.
    pub fn is_product(&self) -> bool {
        let pa0 = self.prob_group(0);
        let xs: BTreeSet<&Vec<Rational>> = self.atoms.iter().map(|at| &at.x).collect();
        xs.into_iter().all(|x| {
            let px: Rational = self.atoms.iter().filter(|at| &at.x == x).map(|at| at.prob.clone()).sum();
            let pxa0: Rational = self.atoms.iter().filter(|at| &at.x == x && at.a == 0).map(|at| at.prob.clone()).sum();
            pxa0 == px * &pa0
        })
    }

    fn check_groups(&self) -> Result<(), OracleError> {
        for a in [0, 1] {
            if self.prob_group(a).is_zero() {
                return Err(OracleError::DegenerateGroup(a));
            }
        }
        Ok(())
    }
}

fn exact(v: f64) -> Rational {
    Rational::from_float(v).expect("tree parameters are finite")
}

/// Exact version of the tree's node test.
fn passes_exact(test: &SplitTest, x: &[Rational]) -> bool {
    let [t0, t1] = test.theta();
    (exact(t0) + exact(t1) * &x[test.feature()]).is_positive()
}

/// Per-atom routing: the nodes on its path and the leaf label it reaches.
struct Routing {
    on_path: Vec<Vec<bool>>,
    label: Vec<Label>,
}

fn route(dist: &FiniteJointDistribution, tree: &DecisionTree) -> Result<Routing, OracleError> {
    if tree.n_features() != dist.n_features() {
        return Err(OracleError::FeatureMismatch { tree: tree.n_features(), dist: dist.n_features() });
    }
    dist.check_groups()?;
    let mut on_path = Vec::with_capacity(dist.atoms.len());
    let mut label = Vec::with_capacity(dist.atoms.len());
    for atom in &dist.atoms {
        let mut path = vec![false; tree.len()];
        let mut id = tree.root();
        loop {
            path[id] = true;
            match tree.node(id)? {
                Node::Leaf { label: l } => {
                    label.push(*l);
                    break;
                }
                Node::Decision { test, left, right } => {
                    id = if passes_exact(test, &atom.x) { *left } else { *right };
                }
            }
        }
        on_path.push(path);
    }
    Ok(Routing { on_path, label })
}

/// `P(E, A=a) = P(E)·P(A=a)` for both `a`, with `E` given per atom.
fn independent_of_group(dist: &FiniteJointDistribution, event: impl Fn(usize) -> bool) -> bool {
    let pe: Rational = (0..dist.atoms.len()).filter(|&i| event(i)).map(|i| dist.atoms[i].prob.clone()).sum();
    [0, 1].into_iter().all(|a| {
        let joint: Rational = (0..dist.atoms.len())
            .filter(|&i| event(i) && dist.atoms[i].a == a)
            .map(|i| dist.atoms[i].prob.clone())
            .sum();
        joint == &pe * dist.prob_group(a)
    })
}

fn check_parity_routed(dist: &FiniteJointDistribution, r: &Routing) -> bool {
    [Label::Negative, Label::Positive].into_iter().all(|y| independent_of_group(dist, |i| r.label[i] == y))
}

fn check_local_routed(dist: &FiniteJointDistribution, r: &Routing, node: NodeId) -> bool {
    independent_of_group(dist, |i| r.on_path[i][node])
}

/// `A ⊥ T(X)`.
pub fn check_statistical_parity(dist: &FiniteJointDistribution, tree: &DecisionTree) -> Result<bool, OracleError> {
    Ok(check_parity_routed(dist, &route(dist, tree)?))
}

/// `A ⊥ dom_{T_t}(X)`.
pub fn check_local_parity(
    dist: &FiniteJointDistribution,
    tree: &DecisionTree,
    node: NodeId,
) -> Result<bool, OracleError> {
    tree.node(node)?;
    Ok(check_local_routed(dist, &route(dist, tree)?, node))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HypothesisCheck {
    pub holds: bool,
    /// The node is reached with probability zero; `holds` is then true.
    pub vacuous: bool,
}

fn check_hypothesis_routed(
    dist: &FiniteJointDistribution,
    tree: &DecisionTree,
    r: &Routing,
    node: NodeId,
) -> Result<HypothesisCheck, OracleError> {
    let Node::Decision { left, .. } = tree.node(node)? else {
        return Err(OracleError::NotDecision(node));
    };
    let in_dom = |i: usize| r.on_path[i][node];
    let p_dom: Rational = (0..dist.atoms.len()).filter(|&i| in_dom(i)).map(|i| dist.atoms[i].prob.clone()).sum();
    if p_dom.is_zero() {
        return Ok(HypothesisCheck { holds: true, vacuous: true });
    }
    // inside the domain I*_t is the test value, i.e. whether the atom went left
    let sum = |f: &dyn Fn(usize) -> bool| -> Rational {
        (0..dist.atoms.len()).filter(|&i| in_dom(i) && f(i)).map(|i| dist.atoms[i].prob.clone()).sum()
    };
    let holds = [true, false].into_iter().all(|v| {
        let p_v = sum(&|i| r.on_path[i][*left] == v);
        [0, 1].into_iter().all(|a| {
            let p_a = sum(&|i| dist.atoms[i].a == a);
            let p_va = sum(&|i| r.on_path[i][*left] == v && dist.atoms[i].a == a);
            p_va * &p_dom == &p_v * p_a
        })
    });
    Ok(HypothesisCheck { holds, vacuous: false })
}

/// `A ⊥ I*_t(X) | dom_{T_t}(X) = 1` at a decision node.
pub fn check_test_hypothesis(
    dist: &FiniteJointDistribution,
    tree: &DecisionTree,
    node: NodeId,
) -> Result<HypothesisCheck, OracleError> {
    let r = route(dist, tree)?;
    check_hypothesis_routed(dist, tree, &r, node)
}

/// An implication checked on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Implication {
    pub premise: bool,
    pub conclusion: bool,
}

impl Implication {
    pub fn holds(&self) -> bool {
        !self.premise || self.conclusion
    }
}

/// Local parity at every terminal node ⇒ statistical parity.
pub fn verify_lemma_terminal(dist: &FiniteJointDistribution, tree: &DecisionTree) -> Result<Implication, OracleError> {
    let r = route(dist, tree)?;
    Ok(Implication {
        premise: tree.terminal_nodes().into_iter().all(|t| check_local_routed(dist, &r, t)),
        conclusion: check_parity_routed(dist, &r),
    })
}

/// Test hypothesis at every decision node ⇒ local parity at every node and
/// statistical parity.
pub fn verify_theorem(dist: &FiniteJointDistribution, tree: &DecisionTree) -> Result<Implication, OracleError> {
    let r = route(dist, tree)?;
    let mut premise = true;
    for t in tree.decision_nodes() {
        premise &= check_hypothesis_routed(dist, tree, &r, t)?.holds;
    }
    let all_local = (0..tree.len()).all(|t| check_local_routed(dist, &r, t));
    Ok(Implication { premise, conclusion: all_local && check_parity_routed(dist, &r) })
}

/// A random `(distribution, tree)` pair.
#[derive(Debug, Clone, Serialize)]
pub struct Instance {
    pub dist: FiniteJointDistribution,
    #[serde(serialize_with = "ser_tree")]
    pub tree: DecisionTree,
}

fn ser_tree<S: serde::Serializer>(t: &DecisionTree, s: S) -> Result<S::Ok, S::Error> {
    t.to_document().serialize(s)
}

/// Splits `total` into `parts` positive integers.
fn composition(rng: &mut impl Rng, total: i64, parts: usize) -> Vec<i64> {
    debug_assert!(parts as i64 <= total && parts > 0);
    let mut cuts: Vec<i64> = (1..total).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<i64> = cuts.into_iter().take(parts - 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain([total]) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// Distinct points on the grid `{0,…,5}^p`.
fn grid_points(rng: &mut impl Rng, p: usize, count: usize) -> Vec<Vec<i64>> {
    let mut all: Vec<Vec<i64>> = if p == 1 {
        (0..6).map(|v| vec![v]).collect()
    } else {
        (0..6).flat_map(|u| (0..6).map(move |v| vec![u, v])).collect()
    };
    all.shuffle(rng);
    all.truncate(count);
    all
}

fn to_rationals(v: &[i64]) -> Vec<Rational> {
    v.iter().map(|&c| rational(c, 1)).collect()
}

/// Product laws (`X ⊥ A`, probabilities `P(x)·P(a)` with denominators up to
/// 8 each) or arbitrary laws on at most 12 atoms with denominators up to 64.
fn random_distribution(rng: &mut impl Rng, p: usize) -> FiniteJointDistribution {
    if rng.random_bool(0.4) {
        let m = rng.random_range(1..=6);
        let dens: Vec<i64> = [4, 6, 8].into_iter().filter(|&d| d >= m as i64).collect();
        let dx = dens[rng.random_range(0..dens.len())];
        let weights = composition(rng, dx, m);
        let xs: Vec<(Vec<Rational>, Rational)> =
            grid_points(rng, p, m).iter().zip(weights).map(|(x, w)| (to_rationals(x), rational(w, dx))).collect();
        let da = [2i64, 4, 8][rng.random_range(0..3)];
        let pa0 = rational(rng.random_range(1..da), da);
        FiniteJointDistribution::product(&xs, pa0).expect("product of valid marginals")
    } else {
        loop {
            let k = rng.random_range(2..=12);
            let den = rng.random_range(k as i64..=64);
            let weights = composition(rng, den, k);
            // (x, a) pairs; x drawn from a small grid so groups share points
            let mut pairs: Vec<(Vec<i64>, u8)> =
                grid_points(rng, p, 36).into_iter().flat_map(|x| [(x.clone(), 0), (x, 1)]).collect();
            pairs.shuffle(rng);
            pairs.truncate(k);
            if !(pairs.iter().any(|(_, a)| *a == 0) && pairs.iter().any(|(_, a)| *a == 1)) {
                continue;
            }
            let atoms = pairs
                .into_iter()
                .zip(weights)
                .map(|((x, a), w)| Atom { x: to_rationals(&x), a, prob: rational(w, den) })
                .collect();
            return FiniteJointDistribution::new(atoms).expect("generated atoms are valid");
        }
    }
}

/// Trees of depth at most 3 whose thresholds are midpoints between grid
/// coordinates, so some domains end up empty.
fn random_tree(rng: &mut impl Rng, p: usize) -> DecisionTree {
    fn build(rng: &mut impl Rng, p: usize, depth: usize, nodes: &mut Vec<Node>) -> NodeId {
        let id = nodes.len();
        let label = if rng.random_bool(0.5) { Label::Positive } else { Label::Negative };
        nodes.push(Node::Leaf { label });
        if depth < 3 && rng.random_bool(0.75 - 0.15 * depth as f64) {
            let feature = rng.random_range(0..p);
            let mid = f64::from(rng.random_range(-1i32..=5)) + 0.5;
            // x < mid or x > mid, with a random positive scale
            let scale = [0.5, 1.0, 2.0][rng.random_range(0..3)];
            let theta = if rng.random_bool(0.5) { [mid * scale, -scale] } else { [-mid * scale, scale] };
            let test = SplitTest::new(feature, theta).expect("finite nonzero slope");
            let left = build(rng, p, depth + 1, nodes);
            let right = build(rng, p, depth + 1, nodes);
            nodes[id] = Node::Decision { test, left, right };
        }
        id
    }
    let mut nodes = Vec::new();
    build(rng, p, 0, &mut nodes);
    DecisionTree::new(nodes, 0, p).expect("generated trees are well formed")
}

pub fn generate_instance(rng: &mut impl Rng) -> Instance {
    let p = rng.random_range(1..=2);
    Instance { dist: random_distribution(rng, p), tree: random_tree(rng, p) }
}

/// Instance `index` of the stream for `seed`; independent of evaluation order.
pub fn instance_at(seed: u64, index: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    generate_instance(&mut rng)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PassFail {
    pub pass: usize,
    pub fail: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheorySummary {
    pub instances: usize,
    pub seed: u64,
    pub lemma: PassFail,
    pub theorem: PassFail,
    /// Instances where the lemma premise held on a tree with a decision node.
    pub lemma_premise_held: usize,
    /// Instances where the theorem premise held on a tree with a decision node.
    pub theorem_premise_held: usize,
    /// Of those, instances where `X` and `A` are dependent.
    pub theorem_premise_held_dependent: usize,
    pub non_vacuity_fraction: f64,
    pub zero_probability_nodes: usize,
    /// Indices of failing instances, at most 20.
    pub failures: Vec<u64>,
}

impl TheorySummary {
    pub fn all_passed(&self) -> bool {
        self.lemma.fail == 0 && self.theorem.fail == 0
    }
}

struct InstanceOutcome {
    lemma: Implication,
    theorem: Implication,
    has_decision: bool,
    dependent: bool,
    zero_nodes: usize,
}

fn evaluate_instance(inst: &Instance) -> Result<InstanceOutcome, OracleError> {
    let r = route(&inst.dist, &inst.tree)?;
    let mut zero_nodes = 0;
    for t in inst.tree.decision_nodes() {
        zero_nodes += usize::from(check_hypothesis_routed(&inst.dist, &inst.tree, &r, t)?.vacuous);
    }
    Ok(InstanceOutcome {
        lemma: verify_lemma_terminal(&inst.dist, &inst.tree)?,
        theorem: verify_theorem(&inst.dist, &inst.tree)?,
        has_decision: !inst.tree.decision_nodes().is_empty(),
        dependent: !inst.dist.is_product(),
        zero_nodes,
    })
}

/// Generates and checks `instances` random instances in parallel.
pub fn verify_theory(instances: usize, seed: u64) -> TheorySummary {
    let outcomes: Vec<Result<InstanceOutcome, OracleError>> =
        (0..instances as u64).into_par_iter().map(|i| evaluate_instance(&instance_at(seed, i))).collect();
    let mut s = TheorySummary {
        instances,
        seed,
        lemma: PassFail::default(),
        theorem: PassFail::default(),
        lemma_premise_held: 0,
        theorem_premise_held: 0,
        theorem_premise_held_dependent: 0,
        non_vacuity_fraction: 0.0,
        zero_probability_nodes: 0,
        failures: Vec::new(),
    };
    for (i, outcome) in outcomes.into_iter().enumerate() {
        // generator output always satisfies the contracts, so an error is a bug
        let ok = match outcome {
            Ok(o) => {
                let tally = |pf: &mut PassFail, imp: Implication| {
                    if imp.holds() {
                        pf.pass += 1;
                    } else {
                        pf.fail += 1;
                    }
                };
                tally(&mut s.lemma, o.lemma);
                tally(&mut s.theorem, o.theorem);
                s.lemma_premise_held += usize::from(o.has_decision && o.lemma.premise);
                let held = o.has_decision && o.theorem.premise;
                s.theorem_premise_held += usize::from(held);
                s.theorem_premise_held_dependent += usize::from(held && o.dependent);
                s.zero_probability_nodes += o.zero_nodes;
                o.lemma.holds() && o.theorem.holds()
            }
            Err(_) => {
                s.lemma.fail += 1;
                s.theorem.fail += 1;
                false
            }
        };
        if !ok && s.failures.len() < 20 {
            s.failures.push(i as u64);
        }
    }
    if instances > 0 {
        s.non_vacuity_fraction = s.theorem_premise_held as f64 / instances as f64;
    }
    s
}
