mod common;

use capsroute_core::capsule::{dynamic_routing, ArchConfig, CapsNet};
use capsroute_core::{ActivationFn, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nested_u(u: &Tensor) -> Vec<Vec<f64>> {
    let d = u.shape()[1];
    u.data().chunks(d).map(|r| r.to_vec()).collect()
}

fn nested_w(w: &Tensor) -> Vec<Vec<Vec<Vec<f64>>>> {
    let s = w.shape();
    (0..s[0])
        .map(|i| {
            (0..s[1])
                .map(|j| (0..s[2]).map(|r| (0..s[3]).map(|k| w.at(&[i, j, r, k])).collect()).collect())
                .collect()
        })
        .collect()
}

#[test]
fn matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let n_in = rng.random_range(1..=16);
        let n_out = rng.random_range(1..=4);
        let (d_in, d_out) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let iters = rng.random_range(1..=4);
        let u = Tensor::random_normal(&[n_in, d_in], 0.7, &mut rng);
        let w = Tensor::random_normal(&[n_in, n_out, d_out, d_in], 0.7, &mut rng);
        let (out, state) = dynamic_routing(&u, &w, iters).unwrap();
        let oracle = common::routing_oracle(&nested_u(&u), &nested_w(&w), iters);
        for j in 0..n_out {
            for r in 0..d_out {
                assert!((out.at(&[j, r]) - oracle.outputs[j][r]).abs() < 1e-10);
            }
        }
        for (t, c) in state.coefficient_history.iter().enumerate() {
            for i in 0..n_in {
                for j in 0..n_out {
                    assert!((c.at(&[i, j]) - oracle.coefficients[t][i][j]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn coefficients_normalize_every_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let u = Tensor::random_normal(&[12, 8], 2.0, &mut rng);
        let w = Tensor::random_normal(&[12, 10, 16, 8], 1.0, &mut rng);
        let (_, state) = dynamic_routing(&u, &w, 5).unwrap();
        assert!(state.max_normalization_error() < 1e-9);
        for c in &state.coefficient_history {
            assert!(c.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let norms = state.outputs.norm_axis(1).unwrap();
        assert!(norms.data().iter().all(|&n| (0.0..1.0).contains(&n)));
    }
}

#[test]
fn single_input_single_output_is_squash() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let u = Tensor::random_normal(&[1, 4], 1.0, &mut rng);
    let mut w = Tensor::zeros(&[1, 1, 4, 4]);
    for k in 0..4 {
        w.set(&[0, 0, k, k], 1.0);
    }
    let (out, _) = dynamic_routing(&u, &w, 1).unwrap();
    let expected = capsroute_core::activations::squash(u.data());
    for (a, b) in out.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn planted_cluster_gains_coefficient_mass() {
    // every input votes the same vector for capsule 0 and noise elsewhere
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (n_in, n_out, d) = (12, 4, 6);
    let u = Tensor::ones(&[n_in, 1]);
    let target: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut w = Tensor::zeros(&[n_in, n_out, d, 1]);
    for i in 0..n_in {
        for j in 0..n_out {
            for r in 0..d {
                let x = if j == 0 { target[r] } else { rng.random_range(-1.0..1.0) };
                w.set(&[i, j, r, 0], x);
            }
        }
    }
    let (_, state) = dynamic_routing(&u, &w, 4).unwrap();
    for t in 1..state.coefficient_history.len() {
        for i in 0..n_in {
            let before = state.coefficient_history[t - 1].at(&[i, 0]);
            let after = state.coefficient_history[t].at(&[i, 0]);
            assert!(after > before, "iteration {t}, capsule {i}: {before} -> {after}");
        }
    }
}

#[test]
fn routing_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let u = Tensor::random_normal(&[9, 8], 1.0, &mut rng);
    let w = Tensor::random_normal(&[9, 10, 16, 8], 1.0, &mut rng);
    let a = dynamic_routing(&u, &w, 3).unwrap();
    let b = dynamic_routing(&u, &w, 3).unwrap();
    assert_eq!(a.1, b.1);
}

#[test]
fn rejects_zero_iterations_and_bad_shapes() {
    let u = Tensor::zeros(&[2, 3]);
    assert!(dynamic_routing(&u, &Tensor::zeros(&[2, 2, 4, 3]), 0).is_err());
    assert!(dynamic_routing(&u, &Tensor::zeros(&[2, 2, 4, 2]), 3).is_err());
    assert!(dynamic_routing(&u, &Tensor::zeros(&[3, 2, 4, 3]), 3).is_err());
}

#[test]
fn cifar_primcaps8_forward() {
    let net = CapsNet::init(ArchConfig::cifar10(8), ActivationFn::OriginalSquash, 0.05, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let image = Tensor::random_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
    let out = net.forward(&image).unwrap();
    assert_eq!(out.primary.capsules.shape(), &[1152, 8]);
    assert_eq!(out.class_activations.len(), 10);
    assert!(out.class_activations.data().iter().all(|&a| (0.0..1.0).contains(&a)));
    assert!(out.primary.activations().iter().all(|&a| a < 1.0));
    assert!(out.routing.max_normalization_error() < 1e-9);
    assert!(net.forward(&Tensor::zeros(&[1, 28, 28])).is_err());
}
