//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the solver or the builder; the oracles recompute
//! what they check from the raw rows.

#![allow(dead_code)]

use fairtree::solver::{FeatureSample, NodeFeatureData};
use fairtree::tree::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Error-free sum of two doubles (Knuth).
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Double-double accumulation of a sequence.
pub fn dd_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for v in values {
        let (s, e) = two_sum(hi, v);
        hi = s;
        lo += e;
    }
    hi + lo
}

/// `log(1 + e^{-m})`, written differently from the library on purpose.
pub fn log_loss_term(m: f64) -> f64 {
    if m > 35.0 {
        // log1p(e^{-m}) = e^{-m} to double precision
        (-m).exp()
    } else if m < -35.0 {
        -m
    } else {
        (-m).exp().ln_1p()
    }
}

pub fn y_of(l: Label) -> f64 {
    if l.is_positive() {
        1.0
    } else {
        -1.0
    }
}

pub fn oracle_loss(theta: [f64; 2], rows: &[FeatureSample]) -> f64 {
    dd_sum(rows.iter().map(|r| log_loss_term(y_of(r.y) * (theta[0] + theta[1] * r.x)))) / rows.len() as f64
}

pub fn oracle_cov(theta: [f64; 2], rows: &[FeatureSample]) -> f64 {
    let n = rows.len() as f64;
    let abar = dd_sum(rows.iter().map(|r| f64::from(r.a))) / n;
    dd_sum(rows.iter().map(|r| (f64::from(r.a) - abar) * (theta[0] + theta[1] * r.x))) / n
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        t.exp() / (1.0 + t.exp())
    }
}

/// Standardized copy of the feature: `(z, mean, sd)`.
pub fn standardize(rows: &[FeatureSample]) -> (Vec<f64>, f64, f64) {
    let n = rows.len() as f64;
    let mean = dd_sum(rows.iter().map(|r| r.x)) / n;
    let sd = (dd_sum(rows.iter().map(|r| (r.x - mean).powi(2))) / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    (rows.iter().map(|r| (r.x - mean) / sd).collect(), mean, sd)
}

/// Minimizes the loss over the intercept for a fixed slope (standardized
/// coordinates) by bisection on the monotone derivative.
fn best_intercept(z: &[f64], y: &[f64], slope: f64) -> f64 {
    let deriv = |b: f64| -> f64 { dd_sum(z.iter().zip(y).map(|(zi, yi)| -yi * logistic(-yi * (b + slope * zi)))) };
    // the optimal intercept lies within the range of the slope term
    let reach = 60.0 + slope.abs() * z.iter().fold(0.0f64, |m, zi| m.max(zi.abs()));
    let (mut lo, mut hi) = (-reach, reach);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn profile_loss(z: &[f64], y: &[f64], slope: f64) -> (f64, f64) {
    let b = best_intercept(z, y, slope);
    let loss = dd_sum(z.iter().zip(y).map(|(zi, yi)| log_loss_term(yi * (b + slope * zi)))) / z.len() as f64;
    (loss, b)
}

/// Constrained logistic fit by grid search over the slope followed by
/// golden-section refinement, with the intercept solved exactly for every
/// slope. The covariance constraint only involves the slope because the
/// centred group indicator sums to zero, so the feasible set is an interval
/// of slopes. `slope_range` caps the search only where the constraint leaves
/// the slope unbounded. Returns `(θ in raw coordinates, loss)`.
pub fn grid_oracle(rows: &[FeatureSample], c: f64, slope_range: f64) -> ([f64; 2], f64) {
    let (z, mean, sd) = standardize(rows);
    let y: Vec<f64> = rows.iter().map(|r| y_of(r.y)).collect();
    let n = rows.len() as f64;
    let abar = dd_sum(rows.iter().map(|r| f64::from(r.a))) / n;
    let gz = dd_sum(rows.iter().zip(&z).map(|(r, zi)| (f64::from(r.a) - abar) * zi)) / n;
    let limit = if gz == 0.0 || !c.is_finite() { slope_range } else { c / gz.abs() };
    let (mut lo, mut hi) = (-limit, limit);
    // coarse grid
    let steps = 400;
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=steps {
        let s = lo + (hi - lo) * k as f64 / steps as f64;
        let (l, _) = profile_loss(&z, &y, s);
        if l < best.0 {
            best = (l, s);
        }
    }
    let width = (hi - lo) / steps as f64;
    lo = (best.1 - width).max(-limit);
    hi = (best.1 + width).min(limit);
    // golden section on the convex profile
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..120 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if profile_loss(&z, &y, m1).0 <= profile_loss(&z, &y, m2).0 {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let slope = 0.5 * (lo + hi);
    let (loss, b) = profile_loss(&z, &y, slope);
    let raw = if rows.iter().all(|r| r.x == rows[0].x) { [b, 0.0] } else { [b - slope * mean / sd, slope / sd] };
    (raw, loss)
}

/// Random node data with a feature on an arbitrary scale, a group indicator
/// correlated with it and noisy logistic labels (never separable in
/// expectation).
pub fn random_node(rng: &mut ChaCha8Rng) -> NodeFeatureData {
    let n = rng.random_range(20..=200);
    let scale = 10f64.powf(rng.random_range(-2.0..4.0));
    let shift = rng.random_range(-3.0..3.0) * scale;
    let link = rng.random_range(-1.5..1.5);
    let slope = rng.random_range(-3.0..3.0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let rows = (0..n)
        .map(|_| {
            let u: f64 = normal.sample(rng);
            let a = u8::from(rng.random::<f64>() < logistic(link * u));
            let p = logistic(slope * u + rng.random_range(-0.5..0.5));
            let y = if rng.random::<f64>() < p { Label::Positive } else { Label::Negative };
            FeatureSample { x: shift + scale * u, a, y }
        })
        .collect();
    NodeFeatureData::new(rows).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fewest training errors over all single-threshold classifiers on `x`,
/// both orientations, thresholds at midpoints (and beyond both ends).
pub fn threshold_scan_errors(x: &[f64], y: &[Label]) -> usize {
    let mut values: Vec<f64> = x.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut cuts = vec![values[0] - 1.0];
    cuts.extend(values.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(values[values.len() - 1] + 1.0);
    cuts.iter()
        .flat_map(|&t| {
            [true, false].map(|above_positive| {
                x.iter().zip(y).filter(|(xi, yi)| ((**xi > t) == above_positive) != yi.is_positive()).count()
            })
        })
        .min()
        .unwrap()
}
