use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares analytic gradients of `sum(f(inputs) * probe)` against central
/// differences for every input element.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&[Var<f64>]) -> Var<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let leaves: Vec<Var<f64>> = inputs.iter().cloned().map(Var::leaf).collect();
    let out = f(&leaves);
    let probe = random(out.shape(), &mut rng);
    let objective = |vars: &[Var<f64>]| -> f64 {
        let y = f(vars);
        y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let loss = sum_all(&mul_const(&out, probe.clone()));
    let grads = loss.backward();
    let eps = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[i]).expect("leaf gradient");
        for j in 0..input.numel() {
            let eval = |delta: f64| {
                let vars: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                objective(&vars)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "input {i} element {j}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn conv3d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 2, 4, 3, 5], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    check(vec![x.clone(), w.clone(), b.clone()], |v| conv3d(&v[0], &v[1], Some(&v[2]), 2, 1));
    check(vec![x, random(&[3, 2, 1, 1, 1], &mut rng), b], |v| conv3d(&v[0], &v[1], Some(&v[2]), 1, 0));
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 3, 2, 2, 1], &mut rng);
    let w = random(&[3, 2, 2, 2, 2], &mut rng);
    let b = random(&[2], &mut rng);
    check(vec![x, w, b], |v| conv_transpose3d(&v[0], &v[1], Some(&v[2])));
}

#[test]
fn instance_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 2, 2, 3, 2], &mut rng);
    let g = random(&[2], &mut rng);
    let b = random(&[2], &mut rng);
    check(vec![x, g, b], |v| instance_norm(&v[0], &v[1], &v[2], 1e-5));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 2, 2, 2], &mut rng);
    let gate = random(&[2, 1, 2, 2, 2], &mut rng);
    let y = random(&[2, 2, 2, 2, 2], &mut rng);
    check(vec![x.clone(), gate], |v| mul_channel_broadcast(&v[0], &sigmoid(&v[1])));
    check(vec![x.clone(), y], |v| concat_channels(&v[0], &leaky_relu(&v[1], 0.01)));
    check(vec![x.clone(), x.map(|v| v * 0.5)], |v| weighted_sum(&[add(&v[0], &v[1]), relu(&v[1])], &[1.0, 0.25]));
}

#[test]
fn trilinear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 2, 2, 3, 2], &mut rng);
    check(vec![x], |v| resize_trilinear(&v[0], [4, 6, 4]));
}

#[test]
fn shared_parents_accumulate() {
    let x = Var::leaf(Tensor::from_vec(vec![2], vec![1.5, -2.0]));
    let y = sum_all(&add(&x, &x));
    let g = y.backward();
    assert_eq!(g.get(&x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn constants_drop_history() {
    let x = Var::constant(Tensor::from_vec(vec![2], vec![1.0f32, 2.0]));
    let y = sigmoid(&x);
    assert!(!y.requires_grad());
    assert!(y.0.parents.is_empty());
}
