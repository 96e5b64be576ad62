use fairtree::metrics::{evaluate_report, MetricsReport, METRIC_NAMES};
use fairtree::tree::Label;
use proptest::prelude::*;

/// Straight tally of the metric definitions, with no shared code: rates are
/// counted per group directly from the three vectors.
struct Tally {
    report: [Option<f64>; 7],
}

fn rate(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn ratio_rule(r0: f64, r1: f64) -> f64 {
    if r0 == r1 {
        1.0
    } else if r0 == 0.0 || r1 == 0.0 {
        0.0
    } else if r0 < r1 {
        r0 / r1
    } else {
        r1 / r0
    }
}

fn tally(pred: &[bool], truth: &[bool], group: &[u8]) -> Tally {
    let count = |f: &dyn Fn(usize) -> bool| (0..pred.len()).filter(|&i| f(i)).count();
    let ba = |sel: &dyn Fn(usize) -> bool| -> Option<f64> {
        let tpr = rate(count(&|i| sel(i) && truth[i] && pred[i]), count(&|i| sel(i) && truth[i]))?;
        let tnr = rate(count(&|i| sel(i) && !truth[i] && !pred[i]), count(&|i| sel(i) && !truth[i]))?;
        Some(0.5 * (tpr + tnr))
    };
    let n0 = count(&|i| group[i] == 0);
    let n1 = count(&|i| group[i] == 1);
    let pos0 = rate(count(&|i| group[i] == 0 && pred[i]), n0);
    let pos1 = rate(count(&|i| group[i] == 1 && pred[i]), n1);
    let neg0 = rate(count(&|i| group[i] == 0 && !pred[i]), n0);
    let neg1 = rate(count(&|i| group[i] == 1 && !pred[i]), n1);
    let both = |a: Option<f64>, b: Option<f64>| a.zip(b);
    Tally {
        report: [
            rate(count(&|i| pred[i] == truth[i]), pred.len()),
            ba(&|_| true),
            ba(&|i| group[i] == 0),
            ba(&|i| group[i] == 1),
            both(pos0, pos1).map(|(a, b)| b - a),
            both(pos0, pos1).map(|(a, b)| ratio_rule(a, b)),
            both(neg0, neg1).map(|(a, b)| ratio_rule(a, b)),
        ],
    }
}

fn labels(v: &[bool]) -> Vec<Label> {
    v.iter().map(|&b| if b { Label::Positive } else { Label::Negative }).collect()
}

fn report(pred: &[bool], truth: &[bool], group: &[u8]) -> MetricsReport {
    evaluate_report(&labels(pred), &labels(truth), group).unwrap()
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        _ => false,
    }
}

fn arb_rows() -> impl Strategy<Value = (Vec<bool>, Vec<bool>, Vec<u8>)> {
    (1usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(0u8..2, n),
        )
    })
}

fn negate(v: Option<f64>) -> Option<f64> {
    v.map(|x| -x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn report_matches_independent_tally((p, t, g) in arb_rows()) {
        let r = report(&p, &t, &g);
        let o = tally(&p, &t, &g);
        for (k, name) in METRIC_NAMES.iter().enumerate() {
            prop_assert!(close(r.get(name), o.report[k]), "{}: {:?} vs {:?}", name, r.get(name), o.report[k]);
        }
        prop_assert_eq!(r.constant_positive, p.iter().all(|&b| b));
        prop_assert_eq!(r.constant_negative, p.iter().all(|&b| !b));
    }

    #[test]
    fn swapping_groups_negates_sp((p, t, g) in arb_rows()) {
        let swapped: Vec<u8> = g.iter().map(|&a| 1 - a).collect();
        let r = report(&p, &t, &g);
        let s = report(&p, &t, &swapped);
        prop_assert_eq!(s.sp, negate(r.sp));
        prop_assert_eq!(s.p_rule, r.p_rule);
        prop_assert_eq!(s.n_rule, r.n_rule);
        prop_assert_eq!(s.bpa, r.bnpa);
        prop_assert_eq!(s.bnpa, r.bpa);
        prop_assert_eq!(s.accuracy, r.accuracy);
        prop_assert_eq!(s.ba, r.ba);
    }

    #[test]
    fn flipping_predictions_swaps_the_rules((p, t, g) in arb_rows()) {
        let flipped: Vec<bool> = p.iter().map(|&b| !b).collect();
        let r = report(&p, &t, &g);
        let f = report(&flipped, &t, &g);
        prop_assert_eq!(f.p_rule, r.n_rule);
        prop_assert_eq!(f.n_rule, r.p_rule);
        prop_assert!(close(f.sp, negate(r.sp)));
        prop_assert!((f.accuracy - (1.0 - r.accuracy)).abs() <= 1e-12);
        prop_assert_eq!(f.constant_positive, r.constant_negative);
    }

    #[test]
    fn relabelling_both_outcomes_keeps_balanced_accuracy((p, t, g) in arb_rows()) {
        let fp: Vec<bool> = p.iter().map(|&b| !b).collect();
        let ft: Vec<bool> = t.iter().map(|&b| !b).collect();
        let r = report(&p, &t, &g);
        let f = report(&fp, &ft, &g);
        prop_assert_eq!(f.accuracy, r.accuracy);
        prop_assert!(close(f.ba, r.ba));
        prop_assert!(close(f.bpa, r.bpa));
        prop_assert!(close(f.bnpa, r.bnpa));
        prop_assert_eq!(f.p_rule, r.n_rule);
    }

    #[test]
    fn row_order_is_irrelevant((p, t, g) in arb_rows(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<bool> = idx.iter().map(|&i| p[i]).collect();
        let tt: Vec<bool> = idx.iter().map(|&i| t[i]).collect();
        let gg: Vec<u8> = idx.iter().map(|&i| g[i]).collect();
        prop_assert_eq!(report(&pp, &tt, &gg), report(&p, &t, &g));
    }

    #[test]
    fn rules_are_ratios_in_the_unit_interval((p, t, g) in arb_rows()) {
        let r = report(&p, &t, &g);
        for v in [r.p_rule, r.n_rule].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Some(sp) = r.sp {
            prop_assert!((-1.0..=1.0).contains(&sp));
            // equal positive rates in both groups is parity
            if sp == 0.0 {
                prop_assert_eq!(r.p_rule, Some(1.0));
                prop_assert_eq!(r.n_rule, Some(1.0));
            }
        }
    }

    #[test]
    fn constant_classifiers_follow_the_degenerate_conventions(t in prop::collection::vec(any::<bool>(), 2..60), seed in any::<u64>()) {
        // both groups present
        let g: Vec<u8> = (0..t.len()).map(|i| ((i as u64 ^ seed) & 1) as u8).collect();
        let all_neg = report(&vec![false; t.len()], &t, &g);
        prop_assert_eq!(all_neg.p_rule, Some(1.0));
        prop_assert_eq!(all_neg.n_rule, Some(1.0));
        prop_assert_eq!(all_neg.sp, Some(0.0));
        prop_assert!(all_neg.constant_negative);
        let all_pos = report(&vec![true; t.len()], &t, &g);
        prop_assert_eq!(all_pos.n_rule, Some(1.0));
        prop_assert_eq!(all_pos.p_rule, Some(1.0));
        prop_assert!(all_pos.constant_positive);
    }
}

#[test]
fn one_sided_zero_rate_is_maximal_disparity() {
    // protected group never predicted positive, the other always
    let p = [false, false, true, true];
    let t = [true, false, true, false];
    let g = [0, 0, 1, 1];
    let r = report(&p, &t, &g);
    assert_eq!(r.p_rule, Some(0.0));
    assert_eq!(r.n_rule, Some(0.0));
    assert_eq!(r.sp, Some(1.0));
}

#[test]
fn missing_group_leaves_group_metrics_undefined() {
    let r = report(&[true, false], &[true, true], &[1, 1]);
    assert_eq!(r.sp, None);
    assert_eq!(r.p_rule, None);
    assert_eq!(r.bpa, None);
    assert_eq!(r.accuracy, 0.5);
    // all-positive truth leaves TNR and hence balanced accuracy undefined
    assert_eq!(r.ba, None);
}

#[test]
fn invalid_inputs_are_rejected() {
    use fairtree::metrics::MetricsError;
    assert_eq!(evaluate_report(&[], &[], &[]), Err(MetricsError::Empty));
    assert!(matches!(
        evaluate_report(&labels(&[true]), &labels(&[true, false]), &[0, 1]),
        Err(MetricsError::LengthMismatch { .. })
    ));
    assert_eq!(evaluate_report(&labels(&[true]), &labels(&[true]), &[2]), Err(MetricsError::InvalidGroup(2)));
}
