mod common;

use common::{grid_oracle, oracle_cov, oracle_loss, random_node, rng, standardize, y_of};
use fairtree::solver::{
    covariance_direction, fit_constrained, fit_constrained_from, fit_unconstrained, logistic_loss, loss_gradient,
    sample_cov_sd, FeatureSample, NodeFeatureData, SolverOptions,
};
use fairtree::tree::Label;
use proptest::prelude::*;
use rand::Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn loss_matches_double_double_oracle() {
    let mut r = rng(1);
    for _ in 0..50 {
        let data = random_node(&mut r);
        let theta = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0) / data.rows()[0].x.abs().max(1.0)];
        let got = logistic_loss(theta, &data);
        let want = oracle_loss(theta, data.rows());
        assert!(rel_err(got, want) <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn covariance_matches_oracle_and_direction() {
    let mut r = rng(2);
    for _ in 0..50 {
        let data = random_node(&mut r);
        let theta = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let cov = sample_cov_sd(theta, &data);
        let g = covariance_direction(&data);
        assert!((cov - oracle_cov(theta, data.rows())).abs() <= 1e-9 * (1.0 + cov.abs()));
        assert!((cov - (g[0] * theta[0] + g[1] * theta[1])).abs() <= 1e-9 * (1.0 + cov.abs()));
    }
}

/// Central differences with `h = 1e−6`, relative to the parameter scale.
#[test]
fn gradient_matches_central_differences() {
    let mut r = rng(3);
    for _ in 0..100 {
        let data = random_node(&mut r);
        let (_, mean, sd) = standardize(data.rows());
        // parameters in a range where the loss is not flat
        let s = r.random_range(-2.0..2.0);
        let theta = [r.random_range(-1.0..1.0) - s * mean / sd, s / sd];
        let grad = loss_gradient(theta, &data);
        for k in 0..2 {
            let h = 1e-6 * theta[k].abs().max(if k == 0 { 1.0 } else { 1.0 / sd });
            let mut plus = theta;
            let mut minus = theta;
            plus[k] += h;
            minus[k] -= h;
            let fd = (oracle_loss(plus, data.rows()) - oracle_loss(minus, data.rows())) / (2.0 * h);
            let scale = grad[k].abs().max(fd.abs());
            // absolute floor for components that are numerically zero
            let floor = if k == 0 { 1e-9 } else { 1e-9 / sd };
            assert!((grad[k] - fd).abs() <= 1e-6 * scale + floor, "component {k}: analytic {} vs fd {fd}", grad[k]);
        }
    }
}

/// KKT residual recomputed in standardized coordinates.
fn oracle_kkt(rows: &[FeatureSample], theta_raw: [f64; 2], c: f64) -> f64 {
    let (z, mean, sd) = standardize(rows);
    let t = [theta_raw[0] + theta_raw[1] * mean, theta_raw[1] * sd];
    let n = rows.len() as f64;
    let mut grad = [0.0, 0.0];
    for (r, zi) in rows.iter().zip(&z) {
        let y = y_of(r.y);
        let m = y * (t[0] + t[1] * zi);
        let w = -y / (1.0 + m.exp());
        grad[0] += w / n;
        grad[1] += w * zi / n;
    }
    let abar = rows.iter().map(|r| f64::from(r.a)).sum::<f64>() / n;
    let g1 = rows.iter().zip(&z).map(|(r, zi)| (f64::from(r.a) - abar) * zi).sum::<f64>() / n;
    let s = g1 * t[1];
    if !c.is_finite() || g1 == 0.0 || s.abs() < c - 1e-9 {
        return grad[0].hypot(grad[1]);
    }
    let sign = s.signum();
    let mu = (-sign * grad[1] * g1 / (g1 * g1)).max(0.0);
    grad[0].hypot(grad[1] + mu * sign * g1)
}

#[test]
fn constrained_fits_match_grid_oracle() {
    let mut r = rng(4);
    let opts = SolverOptions::default();
    let mut converged = 0;
    for i in 0..100 {
        let data = random_node(&mut r);
        let c = 10f64.powf(r.random_range(-4.0..1.0));
        let fit = fit_constrained(&data, c, &opts).unwrap();
        assert!(fit.cov.abs() <= c + 1e-9, "instance {i}: |cov| {} > {c}", fit.cov);
        assert!(oracle_cov(fit.theta, data.rows()).abs() <= c + 1e-9);
        if fit.converged {
            converged += 1;
            assert!(fit.kkt_residual <= 1e-6, "instance {i}: residual {}", fit.kkt_residual);
            assert!(oracle_kkt(data.rows(), fit.theta, c) <= 1e-6 * 1.01, "instance {i}");
        }
        let (_, oracle) = grid_oracle(data.rows(), c, 60.0);
        let loss = oracle_loss(fit.theta, data.rows());
        assert!((loss - oracle).abs() <= 1e-3, "instance {i}: solver {loss} vs oracle {oracle}");
        assert!(loss >= oracle - 1e-6, "instance {i}: solver below a feasible minimum");
    }
    assert!(converged >= 95, "only {converged} of 100 fits converged");
}

#[test]
fn loss_is_monotone_in_the_bound() {
    let mut r = rng(5);
    let opts = SolverOptions::default();
    for _ in 0..100 {
        let data = random_node(&mut r);
        let losses: Vec<f64> =
            [0.01, 0.1, 1.0, 10.0].iter().map(|&c| fit_constrained(&data, c, &opts).unwrap().loss).collect();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{losses:?}");
        }
    }
}

#[test]
fn restarts_reach_the_same_optimum() {
    let mut r = rng(6);
    for _ in 0..20 {
        let data = random_node(&mut r);
        let c = 10f64.powf(r.random_range(-3.0..0.0));
        let opts = SolverOptions::default();
        let base = fit_constrained(&data, c, &opts).unwrap();
        let (_, mean, sd) = standardize(data.rows());
        for _ in 0..5 {
            let s = r.random_range(-5.0..5.0);
            let start = [r.random_range(-5.0..5.0) - s * mean / sd, s / sd];
            let fit = fit_constrained_from(&data, c, &opts, start).unwrap();
            assert!((fit.loss - base.loss).abs() <= 1e-6, "{} vs {}", fit.loss, base.loss);
        }
    }
}

#[test]
fn huge_bound_matches_unconstrained_oracle() {
    let mut r = rng(7);
    let opts = SolverOptions::default();
    for _ in 0..20 {
        let data = random_node(&mut r);
        let fit = fit_constrained(&data, 1e9, &opts).unwrap();
        let free = fit_unconstrained(&data, &opts);
        assert_eq!(fit.theta, free.theta);
        let (theta, _) = grid_oracle(data.rows(), f64::INFINITY, 60.0);
        // compare in standardized units so the raw feature scale drops out
        let (_, mean, sd) = standardize(data.rows());
        let to_z = |t: [f64; 2]| [t[0] + t[1] * mean, t[1] * sd];
        let (a, b) = (to_z(fit.theta), to_z(theta));
        if fit.converged {
            assert!((a[0] - b[0]).hypot(a[1] - b[1]) <= 1e-3, "solver {a:?} vs oracle {b:?}");
        }
    }
}

#[test]
fn tiny_bound_is_feasible_and_costs_loss() {
    let mut r = rng(8);
    let opts = SolverOptions::default();
    let mut exercised = 0;
    for _ in 0..50 {
        let data = random_node(&mut r);
        let free = fit_unconstrained(&data, &opts);
        if free.cov.abs() <= 1e-8 {
            continue;
        }
        exercised += 1;
        let fit = fit_constrained(&data, 1e-8, &opts).unwrap();
        assert!(fit.cov.abs() <= 1e-8 + 1e-9);
        assert!(fit.loss >= free.loss - 1e-12);
        let (_, oracle) = grid_oracle(data.rows(), 1e-8, 60.0);
        assert!((fit.loss - oracle).abs() <= 1e-3);
    }
    assert!(exercised > 30);
}

#[test]
fn single_group_makes_the_bound_irrelevant() {
    let mut r = rng(9);
    for _ in 0..10 {
        let data = random_node(&mut r);
        let rows: Vec<FeatureSample> = data.rows().iter().map(|s| FeatureSample { a: 1, ..*s }).collect();
        let same = NodeFeatureData::new(rows).unwrap();
        let opts = SolverOptions::default();
        let free = fit_unconstrained(&same, &opts);
        for c in [1e-6, 0.1, 10.0] {
            assert_eq!(fit_constrained(&same, c, &opts).unwrap().theta, free.theta);
        }
    }
}

fn arb_rows() -> impl Strategy<Value = Vec<(f64, u8, bool)>> {
    prop::collection::vec((-100.0f64..100.0, 0u8..2, any::<bool>()), 2..60)
}

fn to_data(rows: &[(f64, u8, bool)]) -> NodeFeatureData {
    NodeFeatureData::new(
        rows.iter()
            .map(|&(x, a, y)| FeatureSample { x, a, y: if y { Label::Positive } else { Label::Negative } })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_fit_is_feasible(rows in arb_rows(), log_c in -6.0f64..2.0) {
        let c = 10f64.powf(log_c);
        let data = to_data(&rows);
        let fit = fit_constrained(&data, c, &SolverOptions::default()).unwrap();
        prop_assert!(fit.cov.abs() <= c + 1e-9);
        prop_assert!(fit.loss.is_finite() && fit.loss >= 0.0);
        if fit.converged {
            prop_assert!(fit.kkt_residual <= 1e-6);
        }
        if fit.multiplier > 0.0 {
            prop_assert!(fit.cov.abs() >= c - 1e-9);
        }
    }

    #[test]
    fn loss_never_exceeds_the_origin(rows in arb_rows(), log_c in -6.0f64..2.0) {
        // θ = 0 is always feasible, so the optimum is at most log 2
        let data = to_data(&rows);
        let fit = fit_constrained(&data, 10f64.powf(log_c), &SolverOptions::default()).unwrap();
        prop_assert!(fit.loss <= std::f64::consts::LN_2 + 1e-12);
    }

    #[test]
    fn covariance_is_linear(rows in arb_rows(), t in prop::array::uniform2(-5.0f64..5.0), u in prop::array::uniform2(-5.0f64..5.0), k in -3.0f64..3.0) {
        let data = to_data(&rows);
        let lhs = sample_cov_sd([t[0] + k * u[0], t[1] + k * u[1]], &data);
        let rhs = sample_cov_sd(t, &data) + k * sample_cov_sd(u, &data);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }
}
