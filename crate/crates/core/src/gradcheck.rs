//! Finite-difference checks of every differentiable tape primitive.
//!
//! Each case draws random inputs and a random output weighting `r`, then
//! compares the tape's gradient of `Σ r·f(x)` with central differences.
//! The error of a case is `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)`.
//! Inputs are resampled away from kinks (ReLU at 0, the margin-loss hinges,
//! the CI-squash saturation point).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::activations::ActivationFn;
use crate::autodiff::{MarginLossParams, Tape, Var};
use crate::capsule::{route_on_tape, ArchConfig, CapsNet};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CASES: usize = 100;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance: input tensors and the function applied to them.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub f: Build,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn objective(case: &Case, inputs: &[Tensor], r: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.f)(&mut tape, &vars)?;
    Ok(tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Relative error of one case.
pub fn check_case(case: &Case, h: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.f)(&mut tape, &vars)?;
    let r = Tensor::random_normal(tape.value(out).shape(), 1.0, rng);
    let grads = tape.backward_with(out, r.clone())?;

    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    let mut inputs = case.inputs.clone();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(case.inputs[k].shape()));
        for e in 0..inputs[k].len() {
            let x = inputs[k].data()[e];
            inputs[k].data_mut()[e] = x + h;
            let plus = objective(case, &inputs, &r)?;
            inputs[k].data_mut()[e] = x - h;
            let minus = objective(case, &inputs, &r)?;
            inputs[k].data_mut()[e] = x;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
        }
    }
    let scale = na.sqrt().max(nf.sqrt());
    Ok(if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale })
}

pub fn check_primitive(
    name: &'static str,
    cases: usize,
    seed: u64,
    tolerance: f64,
    make: impl Fn(&mut ChaCha8Rng) -> Case,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let case = make(&mut rng);
        let err = check_case(&case, DEFAULT_STEP, &mut rng)?;
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
    }
    Ok(CheckResult {
        name,
        cases,
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::random_normal(shape, 1.0, rng)
}

/// Normal entries with magnitude at least `gap`.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = normal(shape, rng);
    for x in t.data_mut() {
        while x.abs() < gap {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    t
}

/// `n × d` rows whose norms avoid `[bar·(1−gap), bar·(1+gap)]`.
fn rows_avoiding_norm(n: usize, d: usize, bar: f64, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for row in t.data_mut().chunks_mut(d) {
        loop {
            let scale = rng.random_range(0.05..2.0) * bar;
            row.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            let nrm = crate::activations::norm(row);
            if nrm == 0.0 {
                continue;
            }
            row.iter_mut().for_each(|x| *x *= scale / nrm);
            if (scale - bar).abs() > gap * bar {
                break;
            }
        }
    }
    t
}

fn case(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { inputs, f: Box::new(f) }
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> Case>;

/// Every primitive with its random-case generator.
pub fn primitives() -> Vec<(&'static str, Maker)> {
    let mut v: Vec<(&'static str, Maker)> = Vec::new();
    v.push((
        "matmul",
        Box::new(|rng| {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            case(vec![normal(&[m, k], rng), normal(&[k, n], rng)], |t, x| t.matmul(x[0], x[1]))
        }),
    ));
    v.push((
        "conv2d",
        Box::new(|rng| {
            let (c, o, k) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let s = dim(rng, 1, 2);
            let size = dim(rng, k, 6);
            case(vec![normal(&[c, size, size], rng), normal(&[o, c, k, k], rng)], move |t, x| t.conv2d(x[0], x[1], s))
        }),
    ));
    v.push((
        "conv2d_padded",
        Box::new(|rng| {
            let (c, o, k, p) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 2, 3), dim(rng, 1, 2));
            let size = dim(rng, 2, 5);
            case(vec![normal(&[c, size, size], rng), normal(&[o, c, k, k], rng)], move |t, x| {
                t.conv2d_padded(x[0], x[1], 1, p)
            })
        }),
    ));
    v.push((
        "channel_bias",
        Box::new(|rng| {
            let (c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            case(vec![normal(&[c, h, w], rng), normal(&[c], rng)], |t, x| t.channel_bias(x[0], x[1]))
        }),
    ));
    v.push((
        "add",
        Box::new(|rng| {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let b = if rng.random_bool(0.3) { vec![1] } else { vec![m, n] };
            case(vec![normal(&[m, n], rng), normal(&b, rng)], |t, x| t.add(x[0], x[1]))
        }),
    ));
    v.push((
        "mul",
        Box::new(|rng| {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let b = if rng.random_bool(0.3) { vec![1] } else { vec![m, n] };
            case(vec![normal(&[m, n], rng), normal(&b, rng)], |t, x| t.mul(x[0], x[1]))
        }),
    ));
    v.push((
        "scale",
        Box::new(|rng| {
            let k: f64 = rng.random_range(-3.0..3.0);
            case(vec![normal(&[dim(rng, 1, 6)], rng)], move |t, x| Ok(t.scale(x[0], k)))
        }),
    ));
    v.push((
        "relu",
        Box::new(|rng| {
            let n = dim(rng, 1, 10);
            case(vec![away_from_zero(&[n], 1e-2, rng)], |t, x| Ok(t.relu(x[0])))
        }),
    ));
    v.push((
        "reshape",
        Box::new(|rng| {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
            case(vec![normal(&[m, n], rng)], move |t, x| {
                let y = t.reshape(x[0], &[n * m])?;
                let w = t.constant(Tensor::from_vec((0..n * m).map(|i| i as f64).collect()));
                t.mul(y, w)
            })
        }),
    ));
    v.push((
        "sum",
        Box::new(|rng| case(vec![normal(&[dim(rng, 1, 4), dim(rng, 1, 4)], rng)], |t, x| Ok(t.sum(x[0])))),
    ));
    v.push((
        "softmax",
        Box::new(|rng| {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 2, 5));
            let axis = rng.random_range(0..2);
            case(vec![normal(&[m, n], rng)], move |t, x| t.softmax(x[0], axis))
        }),
    ));
    v.push((
        "vector_norm",
        Box::new(|rng| {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 5));
            let axis = rng.random_range(0..2);
            case(vec![away_from_zero(&[m, n], 0.1, rng)], move |t, x| t.vector_norm(x[0], axis))
        }),
    ));
    v.push((
        "squash",
        Box::new(|rng| {
            let (n, d) = (dim(rng, 1, 4), dim(rng, 1, 8));
            case(vec![normal(&[n, d], rng)], |t, x| t.squash(x[0]))
        }),
    ));
    v.push((
        "ci_squash",
        Box::new(|rng| {
            let bar: f64 = rng.random_range(0.5..8.0);
            let (n, d) = (dim(rng, 1, 4), dim(rng, 1, 8));
            let act = ActivationFn::ci_squash(bar).expect("positive bar");
            case(vec![rows_avoiding_norm(n, d, bar, 1e-2, rng)], move |t, x| t.activation(x[0], act))
        }),
    ));
    v.push((
        "powered_activation",
        Box::new(|rng| {
            let n_pow = rng.random_range(1..=9);
            let (n, d) = (dim(rng, 1, 4), dim(rng, 1, 8));
            let act = ActivationFn::powered(n_pow).expect("positive power");
            case(vec![normal(&[n, d], rng)], move |t, x| {
                let u = t.squash(x[0])?;
                let p = t.power(u, n_pow)?;
                // the fused activation must agree with squash followed by power
                let fused = t.activation(x[0], act)?;
                t.add(p, fused)
            })
        }),
    ));
    v.push((
        "slice_capsules",
        Box::new(|rng| {
            let (p, d, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            case(vec![normal(&[p * d, h, w], rng)], move |t, x| {
                let s = t.slice_capsules(x[0], d)?;
                let w = t.constant(Tensor::new(vec![p * h * w, d], (0..p * h * w * d).map(|i| (i % 7) as f64 - 3.0).collect())?);
                t.mul(s, w)
            })
        }),
    ));
    v.push((
        "capsule_votes",
        Box::new(|rng| {
            let (ni, no, di, dout) = (dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            case(vec![normal(&[ni, di], rng), normal(&[ni, no, dout, di], rng)], |t, x| t.capsule_votes(x[0], x[1]))
        }),
    ));
    v.push((
        "weighted_vote_sum",
        Box::new(|rng| {
            let (ni, no, d) = (dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 4));
            case(vec![normal(&[ni, no], rng), normal(&[ni, no, d], rng)], |t, x| t.weighted_vote_sum(x[0], x[1]))
        }),
    ));
    v.push((
        "agreement",
        Box::new(|rng| {
            let (ni, no, d) = (dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 4));
            case(vec![normal(&[ni, no, d], rng), normal(&[no, d], rng)], |t, x| t.agreement(x[0], x[1]))
        }),
    ));
    v.push((
        "margin_loss",
        Box::new(|rng| {
            let k = dim(rng, 2, 10);
            let params = MarginLossParams::default();
            let mut a = Tensor::zeros(&[k]);
            for x in a.data_mut() {
                loop {
                    *x = rng.random_range(0.0..1.0);
                    if (*x - params.m_plus).abs() > 1e-2 && (*x - params.m_minus).abs() > 1e-2 {
                        break;
                    }
                }
            }
            let targets: Vec<bool> = (0..k).map(|_| rng.random_bool(0.3)).collect();
            case(vec![a], move |t, x| t.margin_loss(x[0], &targets, params))
        }),
    ));
    v.push((
        "dynamic_routing",
        Box::new(|rng| {
            let (ni, no, di, dout) = (dim(rng, 1, 5), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            let iters = rng.random_range(1..=3);
            let u = Tensor::random_normal(&[ni, di], 0.5, rng);
            let w = Tensor::random_normal(&[ni, no, dout, di], 0.5, rng);
            case(vec![u, w], move |t, x| Ok(route_on_tape(t, x[0], x[1], iters)?.output()))
        }),
    ));
    v
}

/// Arch used for the whole-network check: small enough for finite
/// differences over every weight.
fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_channels: 1,
        input_size: 7,
        conv1_channels: 2,
        conv1_kernel: 3,
        conv1_padding: 0,
        conv2_kernel: 3,
        conv2_stride: 2,
        prim_channels: 1,
        prim_dim: 2,
        num_classes: 2,
        digit_dim: 2,
        routing_iters: 2,
    }
}

/// The full network's margin loss as a function of all its weights.
fn network_case(act: ActivationFn) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let arch = tiny_arch();
        // Instances whose class activations all vanish have gradients near
        // 1e-8, where central differences measure round-off; redraw them.
        let (net, image) = loop {
            let net = CapsNet::init(arch.clone(), act, 0.5, rng.random()).expect("valid arch");
            let image = Tensor::random_uniform(&arch.input_shape(), 0.0, 1.0, rng);
            let acts = net.forward(&image).expect("finite forward pass").class_activations;
            if acts.data().iter().any(|&a| a >= 1e-2) {
                break (net, image);
            }
        };
        let mut targets = vec![false; arch.num_classes];
        targets[rng.random_range(0..arch.num_classes)] = true;
        let inputs = net.params.tensors().iter().map(|t| (*t).clone()).collect();
        case(inputs, move |t, x| {
            let params = crate::capsule::ParamVars {
                vars: [x[0], x[1], x[2], x[3], x[4]],
            };
            let fv = net.forward_on_tape(t, params, &image, None)?;
            t.margin_loss(fv.class_activations, &targets, MarginLossParams::default())
        })
    }
}

/// Runs every primitive plus whole-network checks under each activation.
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (k, (name, make)) in primitives().into_iter().enumerate() {
        results.push(check_primitive(name, cases, seed.wrapping_add(k as u64), DEFAULT_TOLERANCE, make)?);
    }
    let nets: [(&'static str, ActivationFn); 3] = [
        ("network_squash", ActivationFn::OriginalSquash),
        ("network_ci_squash", ActivationFn::ci_squash(1.0).expect("positive bar")),
        ("network_powered", ActivationFn::powered(3).expect("positive power")),
    ];
    for (k, (name, act)) in nets.into_iter().enumerate() {
        results.push(check_primitive(name, cases, seed.wrapping_add(100 + k as u64), DEFAULT_TOLERANCE, network_case(act))?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x ↦ x·x where the tape is told the second factor is constant
        let make = |rng: &mut ChaCha8Rng| {
            case(vec![normal(&[3], rng)], |t, x| {
                let c = t.constant(t.value(x[0]).clone());
                t.mul(x[0], c)
            })
        };
        let r = check_primitive("broken", 5, 0, DEFAULT_TOLERANCE, make).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn quick_suite_passes() {
        for r in run_suite(3, 5).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
