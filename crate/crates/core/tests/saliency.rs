mod common;

use common::{normal, random_model, rng, uniform};
use softsense::gradcheck::{activation_pattern, central_difference_smooth, within_tolerance, FD_STEP};
use proptest::prelude::*;
use rand::Rng;
use softsense::model::{record_logits, TIME_STEPS};
use softsense::saliency::{
    aggregate, chain_rule_input_gradient, clip_small, post_weight_gradient, saliency, score_gradients,
    standardize, Class, Grouping, SaliencyMap,
};
use softsense::tape::Tape;
use softsense::Tensor;

const F: usize = 24;

fn sample(r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    normal(&[TIME_STEPS, F], r)
}

#[test]
fn map_matches_finite_differences_of_the_score() {
    let mut r = rng(1);
    let (mut checked, mut skipped) = (0, 0);
    for _ in 0..5 {
        let model = random_model(F, 2, &mut r);
        let x = sample(&mut r);
        for (task, class) in [(0, Class::Failed), (1, Class::Passed)] {
            let map = saliency(&model, &x, task, class).unwrap();
            let numeric = central_difference_smooth(x.data(), FD_STEP, |v| {
                let mut tape = Tape::new();
                let batch = Tensor::new(&[1, 1, TIME_STEPS, F], v.to_vec()).unwrap();
                let rec = record_logits(&model, &mut tape, batch).unwrap();
                let logit = tape.value(rec.logits).data()[task];
                (class.sign() * logit, activation_pattern(&tape))
            });
            for (a, n) in map.data().iter().zip(&numeric) {
                match n {
                    Some(n) => {
                        assert!(within_tolerance(*a, *n), "analytic {a} numeric {n}");
                        checked += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
    }
    assert!(checked > 10 * skipped, "{checked} checked, {skipped} at kinks");
}

#[test]
fn unit_sensor_weights_make_both_gradients_equal() {
    let mut r = rng(2);
    let mut model = random_model(F, 1, &mut r);
    model.sensor_weights = Tensor::ones(&[F]);
    let x = sample(&mut r);
    let a = chain_rule_input_gradient(&model, &x, 0, Class::Failed).unwrap();
    let b = post_weight_gradient(&model, &x, 0, Class::Failed).unwrap();
    assert_eq!(a, b);
}

#[test]
fn aggregate_of_random_maps_is_their_mean() {
    let mut r = rng(3);
    for k in 1..8 {
        let maps: Vec<SaliencyMap> = (0..k)
            .map(|i| SaliencyMap {
                sample_id: format!("s{i}"),
                task: 0,
                class: Class::Failed,
                cell: None,
                values: sample(&mut r),
            })
            .collect();
        let agg = aggregate(&maps, Grouping::ByClass, false).unwrap();
        assert_eq!(agg.groups.len(), 1);
        assert_eq!(agg.missing.len(), 1);
        let g = &agg.groups[0];
        assert_eq!(g.count, k);
        for j in 0..TIME_STEPS * F {
            let want = maps.iter().map(|m| m.values.data()[j]).sum::<f64>() / k as f64;
            assert!((g.mean.data()[j] - want).abs() < 1e-12);
        }
    }
}

fn sparse_map(seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut m = normal(&[TIME_STEPS, F], &mut r);
    for v in m.data_mut() {
        if r.gen_bool(0.3) {
            *v = 0.0;
        }
    }
    m
}

fn distinct_nonzero(m: &Tensor) -> usize {
    let mut v: Vec<f64> = m.data().iter().copied().filter(|x| *x != 0.0).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chain_rule_factorization(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = random_model(F, 2, &mut r);
        let x = sample(&mut r);
        for class in [Class::Passed, Class::Failed] {
            let a = chain_rule_input_gradient(&model, &x, 1, class).unwrap();
            let b = saliency(&model, &x, 1, class).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn two_class_antisymmetry(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = random_model(F, 1, &mut r);
        let x = sample(&mut r);
        let failed = saliency(&model, &x, 0, Class::Failed).unwrap();
        let passed = saliency(&model, &x, 0, Class::Passed).unwrap();
        prop_assert!(failed.data().iter().zip(passed.data()).all(|(a, b)| a + b == 0.0));
    }

    #[test]
    fn saliency_ignores_batch_companions(seed in any::<u64>(), n in 2usize..6) {
        let mut r = rng(seed);
        let model = random_model(F, 2, &mut r);
        let xs: Vec<Tensor> = (0..n).map(|_| sample(&mut r)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let classes: Vec<Class> = (0..n).map(|i| if i % 2 == 0 { Class::Failed } else { Class::Passed }).collect();
        let batch = score_gradients(&model, &refs, 0, &classes).unwrap();
        for i in 0..n {
            let alone = saliency(&model, &xs[i], 0, classes[i]).unwrap();
            prop_assert!(batch.input[i].max_abs_diff(&alone) <= 1e-12);
        }
    }

    #[test]
    fn standardize_output_statistics_and_fixed_point(seed in any::<u64>()) {
        let m = sparse_map(seed);
        prop_assume!(distinct_nonzero(&m) >= 2);
        let s = standardize(&m);
        let nz: Vec<f64> = s.data().iter().copied().filter(|x| *x != 0.0).collect();
        let n = nz.len() as f64;
        let mean = nz.iter().sum::<f64>() / n;
        let sd = (nz.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((sd - 1.0).abs() < 1e-10);
        if distinct_nonzero(&s) >= 2 && !s.data().iter().zip(m.data()).any(|(a, b)| (*a == 0.0) != (*b == 0.0)) {
            prop_assert!(standardize(&s).max_abs_diff(&s) < 1e-10);
        }
    }

    #[test]
    fn clip_is_idempotent(seed in any::<u64>(), theta in 0.0f64..2.0) {
        let m = sparse_map(seed);
        let once = clip_small(&m, theta);
        prop_assert_eq!(clip_small(&once, theta), once.clone());
        prop_assert!(once.data().iter().all(|v| *v == 0.0 || v.abs() > theta));
    }

    #[test]
    fn zero_sensor_weight_zeroes_its_column(seed in any::<u64>(), j in 0usize..F) {
        let mut r = rng(seed);
        let mut model = random_model(F, 1, &mut r);
        model.sensor_weights.data_mut()[j] = 0.0;
        let x = uniform(&[TIME_STEPS, F], -1.0, 1.0, &mut r);
        let map = chain_rule_input_gradient(&model, &x, 0, Class::Failed).unwrap();
        for t in 0..TIME_STEPS {
            prop_assert_eq!(map.data()[t * F + j], 0.0);
        }
    }
}
