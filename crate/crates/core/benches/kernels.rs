//! Single-worker pool versus the default rayon pool. Build with
//! `--no-default-features` to time the sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use prunebench::data::{generate_task, StreamShape, TaskSpec};
use prunebench::model::{Model, ModelSpec, TrainabilityConfig};
use prunebench::ops::{conv2d, ConvGeometry, ConvKernel};
use prunebench::optim::Sgd;
use prunebench::train::train_step;
use prunebench::{par, rng, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng(seed, &[]);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

const POOLS: [(&str, Option<usize>); 2] = [("one_worker", Some(1)), ("default_pool", None)];

fn conv_forward(c: &mut Criterion) {
    let geometry = ConvGeometry::new(16, 32, 3, 1, 1);
    let kernel = ConvKernel::new(geometry, random(&geometry.weight_shape(), 1), None).unwrap();
    let x = random(&[32, 16, 16, 16], 2);
    let mut group = c.benchmark_group("conv_forward_32x16x16x16");
    for (name, threads) in POOLS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::install(threads, || b.iter(|| conv2d(&x, &kernel).unwrap()))
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let base = Model::build(&ModelSpec::default(), 0).unwrap();
    let train = TrainabilityConfig::full(&base);
    let spec = base.spec().clone();
    let x = random(&[32, spec.input_channels, spec.input_size, spec.input_size], 3);
    let y: Vec<usize> = (0..32).map(|i| i % base.head_classes()).collect();
    let mut group = c.benchmark_group("training_step_batch32");
    group.sample_size(20);
    for (name, threads) in POOLS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::install(threads, || {
                let mut model = base.clone();
                let mut opt = Sgd::new(0.01, 0.9);
                let mut step = 0;
                b.iter(|| {
                    step += 1;
                    train_step(&mut model, &train, &mut opt, &x, &y, step).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn task_generation(c: &mut Criterion) {
    let spec = TaskSpec {
        n_classes: 10,
        n_train: 500,
        n_val: 10,
        n_test: 100,
        ..StreamShape::default().build().unwrap().pretrain
    };
    let mut group = c.benchmark_group("generate_task_610_images");
    group.sample_size(20);
    for (name, threads) in POOLS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::install(threads, || b.iter(|| generate_task(&spec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv_forward, training_step, task_generation);
criterion_main!(benches);
