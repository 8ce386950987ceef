use cdcn::metrics::{
    aggregate, compute_metrics, confusion, metrics_at, select_threshold, ConfusionCounts, Label, ProtocolMetrics,
    ThresholdPolicy,
};
use proptest::prelude::*;

const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn scored() -> impl Strategy<Value = Vec<(f64, Label)>> {
    prop::collection::vec(
        (0usize..5, prop::bool::ANY).prop_map(|(g, live)| (GRID[g], if live { Label::Live } else { Label::Spoof })),
        1..=16,
    )
}

/// Independent tally: error rates straight from their definitions.
fn oracle(scores: &[(f64, Label)], t: f64) -> Option<(f64, f64, f64)> {
    let attacks: Vec<f64> = scores.iter().filter(|s| s.1 == Label::Spoof).map(|s| s.0).collect();
    let bona: Vec<f64> = scores.iter().filter(|s| s.1 == Label::Live).map(|s| s.0).collect();
    if attacks.is_empty() || bona.is_empty() {
        return None;
    }
    let apcer = attacks.iter().filter(|&&s| s >= t).count() as f64 / attacks.len() as f64;
    let bpcer = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
    Some((apcer, bpcer, (apcer + bpcer) / 2.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_brute_force(scores in scored(), t in prop_oneof![(0usize..5).prop_map(|i| GRID[i]), Just(0.125), Just(0.6)]) {
        let ours = confusion(&scores, t).and_then(|c| compute_metrics(&c));
        match oracle(&scores, t) {
            None => prop_assert!(ours.is_err()),
            Some((ap, bp, ac)) => {
                let m = ours.unwrap();
                prop_assert_eq!((m.apcer, m.bpcer, m.acer), (ap, bp, ac));
            }
        }
    }

    #[test]
    fn monotone_maps_preserve_counts(scores in scored(), t in 0.0f64..1.0) {
        let f = |s: f64| (3.0 * s).exp() + s * s * s;
        let mapped: Vec<(f64, Label)> = scores.iter().map(|&(s, l)| (f(s), l)).collect();
        prop_assert_eq!(confusion(&scores, t).unwrap(), confusion(&mapped, f(t)).unwrap());
    }

    #[test]
    fn acer_bounds(scores in scored(), t in 0.0f64..1.0) {
        if let Ok(m) = metrics_at(&scores, t) {
            let hi = m.apcer.max(m.bpcer);
            prop_assert!(hi / 2.0 <= m.acer && m.acer <= hi);
        }
    }

    #[test]
    fn min_acer_is_optimal_over_candidates(scores in scored()) {
        if let Ok(t) = select_threshold(&scores, ThresholdPolicy::MinAcer) {
            let best = metrics_at(&scores, t).unwrap().acer;
            for probe in GRID.iter().chain(&[0.1, 0.4, 0.9, 1.5]) {
                prop_assert!(best <= metrics_at(&scores, *probe).unwrap().acer);
            }
        }
    }

    #[test]
    fn aggregate_is_permutation_invariant(acers in prop::collection::vec(0.0f64..1.0, 2..8), rot in 0usize..8) {
        let wrap = |v: &[f64]| v.iter().map(|&acer| ProtocolMetrics { apcer: acer, bpcer: acer, acer, threshold: 0.5, sub_protocol: None }).collect::<Vec<_>>();
        let mut rotated = acers.clone();
        rotated.rotate_left(rot % acers.len());
        rotated.reverse();
        let (m1, s1) = aggregate(&wrap(&acers)).unwrap();
        let (m2, s2) = aggregate(&wrap(&rotated)).unwrap();
        prop_assert!((m1 - m2).abs() <= 1e-12 && (s1 - s2).abs() <= 1e-12);
    }
}

#[test]
fn spot_value() {
    let m = compute_metrics(&ConfusionCounts { tp: 4, tn: 3, fp: 1, fn_: 0 }).unwrap();
    assert_eq!((m.apcer, m.bpcer, m.acer), (0.25, 0.0, 0.125));
}
