use std::hint::black_box;

use capsroute_core::capsule::{dynamic_routing, ArchConfig, CapsNet};
use capsroute_core::tensor::conv2d;
use capsroute_core::{ActivationFn, MarginLossParams, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = Tensor::random_uniform(&[1, 28, 28], 0.0, 1.0, &mut rng);
    let k1 = Tensor::random_normal(&[32, 1, 9, 9], 0.1, &mut rng);
    c.bench_function("conv2d 1x28x28 -> 32x20x20, k9", |b| b.iter(|| conv2d(black_box(&image), &k1, 1, 0).unwrap()));
    let hidden = Tensor::random_uniform(&[32, 20, 20], 0.0, 1.0, &mut rng);
    let k2 = Tensor::random_normal(&[16, 32, 9, 9], 0.1, &mut rng);
    c.bench_function("conv2d 32x20x20 -> 16x6x6, k9 s2", |b| b.iter(|| conv2d(black_box(&hidden), &k2, 2, 0).unwrap()));
}

fn routing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("dynamic_routing 3 iters");
    for n_in in [72, 1152] {
        let u = Tensor::random_normal(&[n_in, 8], 0.5, &mut rng);
        let w = Tensor::random_normal(&[n_in, 10, 16, 8], 0.05, &mut rng);
        group.bench_function(format!("{n_in} -> 10"), |b| b.iter(|| dynamic_routing(black_box(&u), &w, 3).unwrap()));
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("network");
    for (name, arch) in [("desk-mnist", ArchConfig::desk_mnist()), ("desk-cifar10", ArchConfig::desk_cifar10())] {
        let image = Tensor::random_uniform(&arch.input_shape(), 0.0, 1.0, &mut rng);
        let net = CapsNet::init(arch, ActivationFn::powered(6).unwrap(), 0.05, 4).unwrap();
        let mut targets = vec![false; 10];
        targets[3] = true;
        group.bench_function(format!("{name} forward"), |b| b.iter(|| net.forward(black_box(&image)).unwrap()));
        group.bench_function(format!("{name} forward+backward"), |b| {
            b.iter(|| net.loss_and_grad(black_box(&image), &targets, MarginLossParams::default(), None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, routing, network);
criterion_main!(benches);
