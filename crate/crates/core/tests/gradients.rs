//! Central finite-difference checks for every differentiable tape op.

use cless_core::numeric::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TRIALS: u64 = 50;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights so
/// every output element contributes a distinct amount.
fn project(tape: &mut Tape, out: Var, weights: &[f64]) -> Var {
    let flat = tape.concat(&[out]);
    let n = tape.value(flat).len();
    let row = tape.reshape(flat, vec![1, n]).unwrap();
    let w = tape.constant(Tensor::new(vec![n, 1], weights[..n].to_vec()).unwrap());
    let b = tape.constant(Tensor::vector(vec![0.0]));
    let s = tape.affine(row, w, b).unwrap();
    tape.sum(s)
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Max relative error between analytic and central-difference gradients
/// over all inputs.
fn check(inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * H);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn trials(name: &str, tol: f64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let worst = (0..TRIALS).map(|_| case(&mut rng)).fold(0.0, f64::max);
    assert!(worst <= tol, "{name}: max relative error {worst:e} > {tol:e}");
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn conv1d_gradient() {
    // fixed shape from the op examples: 7x3 input, 2 kernels of width 3
    trials("conv1d fixed", 1e-6, |rng| {
        let w = weights(rng, 64);
        let inputs = vec![random(rng, vec![7, 3]), random(rng, vec![2, 3, 3]), random(rng, vec![2])];
        check(inputs, &|t, v| {
            let out = t.conv1d_valid(v[0], v[1], v[2]).unwrap();
            project(t, out, &w)
        })
    });
    trials("conv1d random shapes", 1e-4, |rng| {
        let (s, d, f, k) = (rng.gen_range(3..8), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let w = weights(rng, 64);
        let inputs = vec![random(rng, vec![s, d]), random(rng, vec![f, k.min(s), d]), random(rng, vec![f])];
        check(inputs, &|t, v| {
            let out = t.conv1d_valid(v[0], v[1], v[2]).unwrap();
            project(t, out, &w)
        })
    });
}

#[test]
fn affine_gradient() {
    trials("affine 4x3·3x2", 1e-6, |rng| {
        let w = weights(rng, 8);
        let inputs = vec![random(rng, vec![4, 3]), random(rng, vec![3, 2]), random(rng, vec![2])];
        check(inputs, &|t, v| {
            let out = t.affine(v[0], v[1], v[2]).unwrap();
            project(t, out, &w)
        })
    });
    trials("affine vector input", 1e-4, |rng| {
        let (a, b) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let w = weights(rng, 8);
        let inputs = vec![random(rng, vec![a]), random(rng, vec![a, b]), random(rng, vec![b])];
        check(inputs, &|t, v| {
            let out = t.affine(v[0], v[1], v[2]).unwrap();
            project(t, out, &w)
        })
    });
}

#[test]
fn pair_affine_gradient() {
    trials("pair_affine", 1e-4, |rng| {
        let (at, al, c, h) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
        let w = weights(rng, 32);
        let inputs = vec![
            random(rng, vec![at]),
            random(rng, vec![c, al]),
            random(rng, vec![at + al, h]),
            random(rng, vec![h]),
        ];
        check(inputs, &|t, v| {
            let out = t.pair_affine(v[0], v[1], v[2], v[3]).unwrap();
            project(t, out, &w)
        })
    });
}

#[test]
fn gather_and_segment_mean_gradient() {
    trials("gather + segment_mean", 1e-4, |rng| {
        let (rows, d) = (rng.gen_range(2..6), rng.gen_range(1..4));
        let lengths: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..4)).collect();
        let ids: Vec<usize> = (0..lengths.iter().sum::<usize>()).map(|_| rng.gen_range(0..rows)).collect();
        let w = weights(rng, 64);
        check(vec![random(rng, vec![rows, d])], &|t, v| {
            let g = t.embedding_gather(v[0], &ids).unwrap();
            let m = t.segment_mean(g, &lengths).unwrap();
            project(t, m, &w)
        })
    });
    trials("mean_rows", 1e-4, |rng| {
        let (n, d) = (rng.gen_range(1..5), rng.gen_range(1..4));
        let w = weights(rng, 8);
        check(vec![random(rng, vec![n, d])], &|t, v| {
            let m = t.mean_rows(v[0]).unwrap();
            project(t, m, &w)
        })
    });
}

#[test]
fn pool_and_pointwise_gradient() {
    trials("max_k_pool + relu", 1e-4, |rng| {
        let (n, f) = (rng.gen_range(3..7), rng.gen_range(1..4));
        let k = rng.gen_range(1..=n);
        let w = weights(rng, 64);
        check(vec![random(rng, vec![n, f])], &|t, v| {
            let p = t.max_k_pool(v[0], k).unwrap();
            let r = t.relu(p);
            project(t, r, &w)
        })
    });
    trials("sigmoid", 1e-4, |rng| {
        let n = rng.gen_range(1..6);
        let w = weights(rng, 8);
        check(vec![random(rng, vec![n])], &|t, v| {
            let s = t.sigmoid(v[0]);
            project(t, s, &w)
        })
    });
}

#[test]
fn bce_gradient() {
    trials("sigmoid + bce_mean", 1e-4, |rng| {
        let c = rng.gen_range(1..8);
        let target: Vec<f64> = (0..c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        check(vec![random(rng, vec![c])], &|t, v| {
            let p = t.sigmoid(v[0]);
            t.bce_mean(p, &target).unwrap()
        })
    });
    trials("bce_mean on probabilities", 1e-4, |rng| {
        let c = rng.gen_range(1..8);
        let target: Vec<f64> = (0..c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let probs = Tensor::vector((0..c).map(|_| rng.gen_range(0.05..0.95)).collect());
        check(vec![probs], &|t, v| t.bce_mean(v[0], &target).unwrap())
    });
}

#[test]
fn bce_is_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let c = rng.gen_range(1..10);
        let probs: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let target: Vec<f64> = (0..c).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(probs));
        let l = tape.bce_mean(p, &target).unwrap();
        assert!(tape.value(l).item() >= 0.0);
    }
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, vec![6, 3]).with_grad());
        let k = tape.leaf(random(&mut rng, vec![4, 2, 3]).with_grad());
        let b = tape.leaf(random(&mut rng, vec![4]).with_grad());
        let c = tape.conv1d_valid(x, k, b).unwrap();
        let p = tape.max_k_pool(c, 2).unwrap();
        let r = tape.relu(p);
        let s = tape.sigmoid(r);
        let flat = tape.concat(&[s]);
        let loss = tape.bce_mean(flat, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        tape.backward(loss).unwrap();
        let mut bits: Vec<u64> = vec![tape.value(loss).item().to_bits()];
        for v in [x, k, b] {
            bits.extend(tape.grad(v).unwrap().iter().map(|g| g.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

mod full_model {
    use super::*;
    use cless_core::corpus::PAD;
    use cless_core::model::{ClessConfig, ClessModel, EMBEDDING};
    use cless_core::sampler::{sample_pseudo_batch, PairBatch};

    fn toy_batch(rng: &mut ChaCha8Rng, vocab: usize) -> PairBatch {
        let texts: Vec<Vec<usize>> = (0..2)
            .map(|_| {
                let len = rng.gen_range(1..9);
                (0..len).map(|_| rng.gen_range(2..vocab)).collect()
            })
            .collect();
        let refs: Vec<&[usize]> = texts.iter().map(Vec::as_slice).collect();
        sample_pseudo_batch(&refs, 3, 3, vocab, rng).unwrap()
    }

    #[test]
    fn forward_loss_gradient() {
        trials("forward_loss", 1e-4, |rng| {
            let config = ClessConfig {
                d: 5,
                conv_widths: vec![1, 2, 3],
                filters_per_width: 3,
                pool_k: 2,
                matcher_hidden: vec![4],
                vocab_size: 15,
                seed: rng.gen(),
            };
            let mut model = ClessModel::random(config, 0).unwrap();
            // Spread embeddings and biases. With zero biases a padded window
            // convolves to exactly 0 and sits on the ReLU kink, where a
            // central difference sees half the slope.
            for (name, t) in model.params_mut().iter_mut() {
                let skip = if name == EMBEDDING { 5 } else { 0 };
                if name == EMBEDDING || name.ends_with(".bias") {
                    for v in t.data_mut()[skip..].iter_mut() {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                }
            }
            let batch = toy_batch(rng, 15);
            model.loss_and_grads(&batch).unwrap();
            let analytic: Vec<(String, Vec<f64>)> = model
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.grad().unwrap().to_vec()))
                .collect();
            let mut worst = 0.0f64;
            for (name, grad) in &analytic {
                for j in 0..grad.len() {
                    if name == EMBEDDING && j / 5 == PAD {
                        assert_eq!(grad[j], 0.0, "padding row must stay frozen");
                        continue;
                    }
                    let mut shifted = model.clone();
                    shifted.params_mut().get_mut(name).unwrap().data_mut()[j] += H;
                    let plus = shifted.batch_loss(&batch).unwrap();
                    shifted.params_mut().get_mut(name).unwrap().data_mut()[j] -= 2.0 * H;
                    let minus = shifted.batch_loss(&batch).unwrap();
                    let numeric = (plus - minus) / (2.0 * H);
                    let denom = grad[j].abs().max(numeric.abs()).max(1e-3);
                    worst = worst.max((grad[j] - numeric).abs() / denom);
                }
            }
            worst
        });
    }
}
