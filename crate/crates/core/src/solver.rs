//! Covariance-constrained univariate logistic regression.
//!
//! Solves
//!
//! ```text
//! minimize    ℓ(θ) = (1/n) Σ log(1 + exp(−yᵢ·(θ₀ + θ₁·xᵢ)))
//! subject to  |Ĉov(θ₀ + θ₁·X, A)| ≤ c
//! ```
//!
//! with `Ĉov(sd, A) = (1/n) Σ (aᵢ − ā)·sdᵢ`. The covariance is linear in θ,
//! `Ĉov = gᵀθ` with `g = (1/n) Σ (aᵢ − ā)·(1, xᵢ)`, so the feasible set is the
//! slab `−c ≤ gᵀθ ≤ c` and has a closed-form Euclidean projection. The
//! program is solved by projected gradient descent with Armijo backtracking
//! on a standardized copy of the feature; θ is mapped back to the raw scale
//! on exit. The constraint value does not depend on that re-parametrization
//! because it only sees the values `θᵀ(1, x)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::Label;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("no rows to fit")]
    EmptyData,
    #[error("row {row}: feature value is not finite")]
    NonFinite { row: usize },
    #[error("row {row}: protected attribute must be 0 or 1, got {value}")]
    InvalidGroup { row: usize, value: u8 },
    #[error("covariance bound must be positive, got {0}")]
    InvalidBound(f64),
}

/// One row of a node's data projected onto a single feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSample {
    pub x: f64,
    pub a: u8,
    pub y: Label,
}

/// The rows of a node projected onto one feature (`D_{t,j}`).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureData {
    rows: Vec<FeatureSample>,
}

impl NodeFeatureData {
    pub fn new(rows: Vec<FeatureSample>) -> Result<Self, SolverError> {
        if rows.is_empty() {
            return Err(SolverError::EmptyData);
        }
        for (row, s) in rows.iter().enumerate() {
            if !s.x.is_finite() {
                return Err(SolverError::NonFinite { row });
            }
            if s.a > 1 {
                return Err(SolverError::InvalidGroup { row, value: s.a });
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[FeatureSample] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Solver knobs. Loaded from the `[solver]` table of a harness config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub kkt_tol: f64,
    pub feas_tol: f64,
    /// Trial step of the first iteration; later ones use a curvature estimate.
    pub initial_step: f64,
    /// Armijo sufficient-decrease factor.
    pub armijo_slope: f64,
    /// Backtracking shrink factor.
    pub shrink: f64,
    /// Seed for randomized restarts; the solver itself is deterministic.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            kkt_tol: 1e-6,
            feas_tol: 1e-9,
            initial_step: 1.0,
            armijo_slope: 1e-4,
            shrink: 0.5,
            seed: 0,
        }
    }
}

/// Result of one constrained fit. `theta` is on the raw feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClrFit {
    pub theta: [f64; 2],
    pub loss: f64,
    pub cov: f64,
    pub c: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of `∇ℓ + μ·sign(gᵀθ)·g` at the best multiplier `μ ≥ 0`
    /// (`μ = 0` while the constraint is inactive), in standardized coordinates.
    pub kkt_residual: f64,
    pub multiplier: f64,
    /// The feature had zero variance; only the intercept was fitted.
    pub degenerate_feature: bool,
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `1 / (1 + exp(−t))` without overflow.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn sign_of(label: Label) -> f64 {
    f64::from(label.value())
}

/// Mean logistic loss `ℓ(θ)` under ±1 labels.
pub fn logistic_loss(theta: [f64; 2], data: &NodeFeatureData) -> f64 {
    let n = data.len() as f64;
    data.rows.iter().map(|s| softplus(-sign_of(s.y) * (theta[0] + theta[1] * s.x))).sum::<f64>() / n
}

/// Analytic gradient of [`logistic_loss`].
pub fn loss_gradient(theta: [f64; 2], data: &NodeFeatureData) -> [f64; 2] {
    let n = data.len() as f64;
    let mut grad = [0.0; 2];
    for s in &data.rows {
        let y = sign_of(s.y);
        let w = -y * sigmoid(-y * (theta[0] + theta[1] * s.x));
        grad[0] += w;
        grad[1] += w * s.x;
    }
    [grad[0] / n, grad[1] / n]
}

fn mean_group(data: &NodeFeatureData) -> f64 {
    data.rows.iter().map(|s| f64::from(s.a)).sum::<f64>() / data.len() as f64
}

/// `Ĉov(sd_θ(X), A)`, normalized by `1/n`.
pub fn sample_cov_sd(theta: [f64; 2], data: &NodeFeatureData) -> f64 {
    let abar = mean_group(data);
    data.rows.iter().map(|s| (f64::from(s.a) - abar) * (theta[0] + theta[1] * s.x)).sum::<f64>() / data.len() as f64
}

/// The vector `g` with `Ĉov(sd_θ, A) = gᵀθ`.
pub fn covariance_direction(data: &NodeFeatureData) -> [f64; 2] {
    let abar = mean_group(data);
    let n = data.len() as f64;
    let mut g = [0.0; 2];
    for s in &data.rows {
        let d = f64::from(s.a) - abar;
        g[0] += d;
        g[1] += d * s.x;
    }
    [g[0] / n, g[1] / n]
}

/// The feature standardized to zero mean and unit variance, with the
/// covariance direction expressed in the same coordinates.
struct Problem {
    z: Vec<f64>,
    y: Vec<f64>,
    mean: f64,
    scale: f64,
    degenerate: bool,
    /// First component is exactly zero: Σ(aᵢ − ā) vanishes identically.
    g: [f64; 2],
    bound: f64,
}

impl Problem {
    fn new(data: &NodeFeatureData, bound: f64) -> Self {
        let n = data.len() as f64;
        let mean = data.rows.iter().map(|s| s.x).sum::<f64>() / n;
        let var = data.rows.iter().map(|s| (s.x - mean).powi(2)).sum::<f64>() / n;
        let (lo, hi) =
            data.rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.x), hi.max(s.x)));
        let degenerate = lo == hi || var == 0.0;
        let scale = if degenerate { 1.0 } else { var.sqrt() };
        let z: Vec<f64> = data.rows.iter().map(|s| if degenerate { 0.0 } else { (s.x - mean) / scale }).collect();
        let y = data.rows.iter().map(|s| sign_of(s.y)).collect();
        let abar = mean_group(data);
        let g1 = data.rows.iter().zip(&z).map(|(s, zi)| (f64::from(s.a) - abar) * zi).sum::<f64>() / n;
        Self { z, y, mean, scale, degenerate, g: [0.0, g1], bound }
    }

    /// Loss and gradient in one pass, sharing one exponential per row.
    fn loss_grad(&self, t: [f64; 2]) -> (f64, [f64; 2]) {
        let n = self.z.len() as f64;
        let (mut loss, mut g0, mut g1) = (0.0, 0.0, 0.0);
        for (z, y) in self.z.iter().zip(&self.y) {
            // margin m; loss term softplus(−m), weight σ(−m)
            let m = y * (t[0] + t[1] * z);
            let e = (-m.abs()).exp();
            let (term, w) = if m > 0.0 { (e.ln_1p(), e / (1.0 + e)) } else { (e.ln_1p() - m, 1.0 / (1.0 + e)) };
            loss += term;
            g0 -= y * w;
            g1 -= y * w * z;
        }
        if self.degenerate {
            g1 = 0.0;
        }
        (loss / n, [g0 / n, g1 / n])
    }

    fn constrained(&self) -> bool {
        self.bound.is_finite() && self.g[1] != 0.0
    }

    fn cov(&self, t: [f64; 2]) -> f64 {
        self.g[0] * t[0] + self.g[1] * t[1]
    }

    fn project(&self, t: [f64; 2]) -> [f64; 2] {
        if !self.constrained() {
            return t;
        }
        let s = self.cov(t);
        let excess = if s > self.bound {
            s - self.bound
        } else if s < -self.bound {
            s + self.bound
        } else {
            return t;
        };
        let gn2 = self.g[0] * self.g[0] + self.g[1] * self.g[1];
        [t[0] - excess / gn2 * self.g[0], t[1] - excess / gn2 * self.g[1]]
    }

    fn to_raw(&self, t: [f64; 2]) -> [f64; 2] {
        if self.degenerate {
            return [t[0], 0.0];
        }
        [t[0] - t[1] * self.mean / self.scale, t[1] / self.scale]
    }

    fn standardize(&self, t: [f64; 2]) -> [f64; 2] {
        if self.degenerate {
            return [t[0] + t[1] * self.mean, 0.0];
        }
        [t[0] + t[1] * self.mean, t[1] * self.scale]
    }

    /// KKT residual and the minimizing multiplier at `t`.
    fn kkt(&self, t: [f64; 2], grad: [f64; 2], feas_tol: f64) -> (f64, f64) {
        let plain = norm(grad);
        let s = self.cov(t);
        if !self.constrained() || s.abs() < self.bound - feas_tol {
            return (plain, 0.0);
        }
        let sign = s.signum();
        let gn2 = self.g[0] * self.g[0] + self.g[1] * self.g[1];
        let mu = (-sign * (grad[0] * self.g[0] + grad[1] * self.g[1]) / gn2).max(0.0);
        let r = [grad[0] + mu * sign * self.g[0], grad[1] + mu * sign * self.g[1]];
        (norm(r), mu)
    }
}

/// Range of the curvature-based trial step.
const MIN_STEP: f64 = 1e-10;
const MAX_STEP: f64 = 1e8;

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

fn validate_bound(c: f64) -> Result<(), SolverError> {
    if c.is_nan() || c <= 0.0 {
        return Err(SolverError::InvalidBound(c));
    }
    Ok(())
}

/// Constrained fit from `θ = (0, 0)`, which is always feasible.
///
/// `c = f64::INFINITY` disables the constraint entirely.
pub fn fit_constrained(data: &NodeFeatureData, c: f64, opts: &SolverOptions) -> Result<ClrFit, SolverError> {
    fit_constrained_from(data, c, opts, [0.0, 0.0])
}

/// Plain logistic regression on one feature.
pub fn fit_unconstrained(data: &NodeFeatureData, opts: &SolverOptions) -> ClrFit {
    fit_constrained_from(data, f64::INFINITY, opts, [0.0, 0.0]).expect("infinite bound is valid")
}

/// Constrained fit from an arbitrary raw-scale start, which is first
/// projected onto the feasible slab.
pub fn fit_constrained_from(
    data: &NodeFeatureData,
    c: f64,
    opts: &SolverOptions,
    start: [f64; 2],
) -> Result<ClrFit, SolverError> {
    validate_bound(c)?;
    let problem = Problem::new(data, c);

    let mut theta = problem.project(problem.standardize(start));
    let (mut f, mut grad) = problem.loss_grad(theta);
    let mut iterations = 0;
    let mut converged = false;

    let stationary = |theta: [f64; 2], grad: [f64; 2]| {
        let stepped = problem.project([theta[0] - grad[0], theta[1] - grad[1]]);
        let pg = norm([theta[0] - stepped[0], theta[1] - stepped[1]]);
        let (kkt, _) = problem.kkt(theta, grad, opts.feas_tol);
        pg <= opts.kkt_tol && kkt <= opts.kkt_tol
    };

    // after the first iteration each search starts from the Barzilai-Borwein
    // step sᵀs / sᵀΔg, the inverse curvature along the last move: long on
    // flat (near-separable) problems, short where the loss bends sharply
    let mut step = opts.initial_step;
    while iterations < opts.max_iter {
        if stationary(theta, grad) {
            converged = true;
            break;
        }
        let accepted = loop {
            let cand = problem.project([theta[0] - step * grad[0], theta[1] - step * grad[1]]);
            let (fc, gc) = problem.loss_grad(cand);
            let decrease = grad[0] * (cand[0] - theta[0]) + grad[1] * (cand[1] - theta[1]);
            if fc <= f + opts.armijo_slope * decrease {
                break Some((cand, fc, gc));
            }
            step *= opts.shrink;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((cand, fc, gc)) = accepted else { break };
        if cand == theta {
            break;
        }
        let sd = [cand[0] - theta[0], cand[1] - theta[1]];
        let curv = sd[0] * (gc[0] - grad[0]) + sd[1] * (gc[1] - grad[1]);
        step = if curv > 0.0 { ((sd[0] * sd[0] + sd[1] * sd[1]) / curv).clamp(MIN_STEP, MAX_STEP) } else { MAX_STEP };
        theta = cand;
        f = fc;
        grad = gc;
        iterations += 1;
    }
    if !converged {
        converged = stationary(theta, grad);
    }

    let (kkt_residual, multiplier) = problem.kkt(theta, grad, opts.feas_tol);
    let raw = problem.to_raw(theta);
    let cov = sample_cov_sd(raw, data);
    if cov.abs() > c + opts.feas_tol {
        converged = false;
    }
    Ok(ClrFit {
        theta: raw,
        loss: logistic_loss(raw, data),
        cov,
        c,
        iterations,
        converged,
        kkt_residual,
        multiplier,
        degenerate_feature: problem.degenerate,
    })
}
