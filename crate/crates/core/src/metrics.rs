//! Group-stratified confusion counts and the accuracy/fairness metrics built
//! on them.
//!
//! `+1` is the positive class, group `a = 0` is the protected one. Metrics that
//! need an absent class or group are `None` and serialize as `null`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: {predictions} predictions, {truths} truths, {groups} groups")]
    LengthMismatch { predictions: usize, truths: usize, groups: usize },
    #[error("no rows to evaluate")]
    Empty,
    #[error("group value {0} is not 0 or 1")]
    InvalidGroup(u8),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl Confusion {
    fn add(&mut self, pred: Label, truth: Label) {
        match (pred, truth) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Negative, Label::Positive) => self.fn_ += 1,
            (Label::Positive, Label::Negative) => self.fp += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    /// `½(TPR + TNR)`, undefined when either class is absent.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        Some(0.5 * (self.tpr()? + self.tnr()?))
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    /// Share of positive predictions.
    pub fn positive_rate(&self) -> Option<f64> {
        ratio(self.tp + self.fp, self.total())
    }

    pub fn negative_rate(&self) -> Option<f64> {
        ratio(self.tn + self.fn_, self.total())
    }

    fn sum(&self, other: &Confusion) -> Confusion {
        Confusion { tp: self.tp + other.tp, fn_: self.fn_ + other.fn_, fp: self.fp + other.fp, tn: self.tn + other.tn }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion counts for the protected group (`a = 0`) and the rest (`a = 1`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedConfusion {
    pub protected: Confusion,
    pub nonprotected: Confusion,
}

impl StratifiedConfusion {
    pub fn overall(&self) -> Confusion {
        self.protected.sum(&self.nonprotected)
    }

    pub fn group(&self, a: u8) -> &Confusion {
        if a == 0 {
            &self.protected
        } else {
            &self.nonprotected
        }
    }
}

pub fn stratified_confusion(
    predictions: &[Label],
    truths: &[Label],
    groups: &[u8],
) -> Result<StratifiedConfusion, MetricsError> {
    if predictions.len() != truths.len() || truths.len() != groups.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
            groups: groups.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = StratifiedConfusion::default();
    for ((&p, &t), &a) in predictions.iter().zip(truths).zip(groups) {
        match a {
            0 => cm.protected.add(p, t),
            1 => cm.nonprotected.add(p, t),
            other => return Err(MetricsError::InvalidGroup(other)),
        }
    }
    Ok(cm)
}

/// Overall, protected and non-protected balanced accuracy.
pub fn balanced_accuracies(cm: &StratifiedConfusion) -> (Option<f64>, Option<f64>, Option<f64>) {
    (cm.overall().balanced_accuracy(), cm.protected.balanced_accuracy(), cm.nonprotected.balanced_accuracy())
}

/// `P(Ŷ=+1 | a=1) − P(Ŷ=+1 | a=0)`; positive values disfavour the protected
/// group.
pub fn statistical_parity_difference(cm: &StratifiedConfusion) -> Option<f64> {
    Some(cm.nonprotected.positive_rate()? - cm.protected.positive_rate()?)
}

/// Min-ratio between the two groups' rates. Both rates zero means the
/// classifier never outputs that label, which counts as parity (1). Exactly
/// one zero rate is maximal disparity (0).
fn min_ratio(r0: f64, r1: f64) -> f64 {
    match (r0 == 0.0, r1 == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => (r0 / r1).min(r1 / r0),
    }
}

pub fn p_rule(cm: &StratifiedConfusion) -> Option<f64> {
    Some(min_ratio(cm.protected.positive_rate()?, cm.nonprotected.positive_rate()?))
}

pub fn n_rule(cm: &StratifiedConfusion) -> Option<f64> {
    Some(min_ratio(cm.protected.negative_rate()?, cm.nonprotected.negative_rate()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub ba: Option<f64>,
    pub bpa: Option<f64>,
    pub bnpa: Option<f64>,
    pub sp: Option<f64>,
    pub p_rule: Option<f64>,
    pub n_rule: Option<f64>,
    pub constant_positive: bool,
    pub constant_negative: bool,
}

/// Names of the real-valued report fields, in output order.
pub const METRIC_NAMES: [&str; 7] = ["accuracy", "ba", "bpa", "bnpa", "sp", "p_rule", "n_rule"];

impl MetricsReport {
    pub fn from_confusion(cm: &StratifiedConfusion) -> Self {
        let overall = cm.overall();
        let (ba, bpa, bnpa) = balanced_accuracies(cm);
        Self {
            accuracy: overall.accuracy().expect("confusion built from nonempty input"),
            ba,
            bpa,
            bnpa,
            sp: statistical_parity_difference(cm),
            p_rule: p_rule(cm),
            n_rule: n_rule(cm),
            constant_positive: overall.tn + overall.fn_ == 0,
            constant_negative: overall.tp + overall.fp == 0,
        }
    }

    /// Looks a metric up by one of [`METRIC_NAMES`].
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "ba" => self.ba,
            "bpa" => self.bpa,
            "bnpa" => self.bnpa,
            "sp" => self.sp,
            "p_rule" => self.p_rule,
            "n_rule" => self.n_rule,
            _ => None,
        }
    }
}

pub fn evaluate_report(predictions: &[Label], truths: &[Label], groups: &[u8]) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport::from_confusion(&stratified_confusion(predictions, truths, groups)?))
}
