//! Compares tape gradients of the training loss with central finite
//! differences for every parameter tensor of a small model, w¹ included.
//! Coordinates whose stencil crosses a ReLU kink are skipped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use softsense::gradcheck::{activation_pattern, central_difference_smooth, within_tolerance, FD_STEP};
use softsense::model::{ArchitectureConfig, ModelParams, TIME_STEPS};
use softsense::tape::{Mode, Tape};
use softsense::Tensor;

const N: usize = 6;
const F: usize = 12;

fn slot(m: &mut ModelParams, k: usize) -> &mut Tensor {
    let trunk = m.trainable_mut().len();
    if k < trunk {
        m.trainable_mut().swap_remove(k)
    } else {
        &mut m.sensor_weights
    }
}

fn loss(params: &ModelParams, x: &Tensor, y: &Tensor) -> (f64, Vec<bool>) {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let input = tape.leaf(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = params.forward(&mut tape, &vars, input, Mode::Train, &mut rng).unwrap();
    let l = tape.weighted_bce(fwd.probs, y.clone(), Tensor::ones(&[N, 1]), vec![3.0]).unwrap();
    (tape.value(l).item().unwrap(), activation_pattern(&tape))
}

fn main() -> softsense::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ArchitectureConfig {
        kernels_per_branch: 3,
        hidden_width: 5,
        dropout: 0.0,
        ..ArchitectureConfig::new(F, 1)
    };
    let params = ModelParams::init(&cfg, &mut rng)?;
    let x: Vec<f64> = (0..N * TIME_STEPS * F).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor::new(&[N, 1, TIME_STEPS, F], x)?;
    let y = Tensor::new(&[N, 1], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0])?;

    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let input = tape.leaf(x.clone());
    let fwd = params.forward(&mut tape, &vars, input, Mode::Train, &mut rng)?;
    let l = tape.weighted_bce(fwd.probs, y.clone(), Tensor::ones(&[N, 1]), vec![3.0])?;
    let mut wrt = vars.trainable();
    wrt.push(vars.sensor_weights);
    let grads = tape.backward(l, &wrt)?;

    let mut names: Vec<String> = (0..3)
        .flat_map(|i| ["kernels", "bias", "bn_gamma", "bn_beta"].map(|t| format!("branch{i}.{t}")))
        .collect();
    names.extend(["hidden.weight", "hidden.bias", "head.weight", "head.bias", "sensor_weights"].map(String::from));
    for (k, var) in wrt.iter().enumerate() {
        let mut probe = params.clone();
        let base = slot(&mut probe, k).data().to_vec();
        let numeric = central_difference_smooth(&base, FD_STEP, |p| {
            slot(&mut probe, k).data_mut().copy_from_slice(p);
            loss(&probe, &x, &y)
        });
        let analytic = grads.wrt(*var).data();
        let skipped = numeric.iter().filter(|n| n.is_none()).count();
        let bad = analytic
            .iter()
            .zip(&numeric)
            .filter(|(a, n)| n.is_some_and(|n| !within_tolerance(**a, n)))
            .count();
        println!("{:<18} {:>4} values, {bad} mismatched, {skipped} at a kink", names[k], base.len());
    }
    Ok(())
}
