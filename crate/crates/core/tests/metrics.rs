use proptest::prelude::*;
use softsense::metrics::{auroc, tpr};

/// Every positive-negative pair: 1 when the positive scores higher, 0.5 on
/// a tie.
fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=12).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..6).prop_map(|v| v as f64 * 0.5), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, y)| y.contains(&true) && y.contains(&false))
    })
}

fn tie_free() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    case().prop_map(|(_, y)| {
        let s = (0..y.len()).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        (s, y)
    })
}

#[test]
fn reference_cases() {
    assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
    assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    assert_eq!(tpr(&[true, true, false], &[true, true, false]).unwrap(), 1.0);
    assert_eq!(tpr(&[false, false, false], &[true, true, false]).unwrap(), 0.0);
    assert!(tpr(&[true], &[false]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn auroc_equals_pair_counting((s, y) in case()) {
        prop_assert!((auroc(&s, &y).unwrap() - pair_count(&s, &y)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_maps((s, y) in case(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = auroc(&s, &y).unwrap();
        let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let affine: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        prop_assert!((auroc(&exp, &y).unwrap() - base).abs() <= 1e-12);
        prop_assert!((auroc(&affine, &y).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn negated_scores_complement((s, y) in tie_free()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn duplication_keeps_auroc((s, y) in case()) {
        let s2: Vec<f64> = s.iter().chain(&s).copied().collect();
        let y2: Vec<bool> = y.iter().chain(&y).copied().collect();
        prop_assert!((auroc(&s2, &y2).unwrap() - auroc(&s, &y).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn tpr_matches_counts(p in prop::collection::vec(any::<bool>(), 1..30), seed in any::<u64>()) {
        let y: Vec<bool> = p.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
        let tp = p.iter().zip(&y).filter(|(a, b)| **a && **b).count() as f64;
        let pos = y.iter().filter(|b| **b).count() as f64;
        prop_assert_eq!(tpr(&p, &y).unwrap(), tp / pos);
    }
}
