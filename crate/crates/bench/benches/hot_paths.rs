//! Benchmarks for the paths that dominate wall time: the implicit
//! generating-function step, long rollouts, the training gradient,
//! the finite-difference symplecticity check and reference data
//! generation.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use gfnn::dataset::{extract_pairs, generate_dataset, GenerationConfig, SamplingScheme};
use gfnn::net::loss_param_grad;
use gfnn::training::{train_gfnn, TrainConfig};
use gfnn::{Activation, AnalyticGf, GenFunMap, ParamNet, PhaseState, SolverConfig, SystemSpec};

fn circular_orbit() -> PhaseState {
    PhaseState::new(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap()
}

fn net_map(h: f64) -> GenFunMap {
    let net = ParamNet::xavier(&[4, 64, 64, 1], Activation::Tanh, 7).unwrap();
    GenFunMap::from_net(net, h, SolverConfig::default()).unwrap()
}

fn kepler_dataset(n_sequences: usize, seed: u64) -> gfnn::dataset::TrajectoryDataset {
    let sampling = SamplingScheme::OrbitalBox {
        a_range: (0.9, 1.1),
        e_range: (0.0, 0.1),
        anomaly_range: (0.0, std::f64::consts::TAU),
        periapsis_range: (0.0, std::f64::consts::TAU),
    };
    let gen = GenerationConfig {
        h: 0.1,
        tau: 0.01,
        scheme: None,
        seq_len: 20,
        n_sequences,
        seed,
    };
    generate_dataset(SystemSpec::Kepler2d, &sampling, &gen).unwrap()
}

fn bench_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("step");
    let map = net_map(0.1);
    let s = circular_orbit();
    g.bench_function("implicit_net_64x64", |b| {
        b.iter(|| map.step(black_box(&s)).unwrap())
    });
    let harm = GenFunMap::analytic(AnalyticGf::HarmonicRotation, 1, 0.1, SolverConfig::default())
        .unwrap();
    let s1 = PhaseState::new(vec![0.0], vec![1.0]).unwrap();
    g.bench_function("implicit_analytic_harmonic", |b| {
        b.iter(|| harm.step(black_box(&s1)).unwrap())
    });
    g.finish();
}

fn bench_rollout(c: &mut Criterion) {
    let mut g = c.benchmark_group("rollout");
    g.sample_size(20);
    let map = net_map(0.1);
    let s = circular_orbit();
    g.bench_function("net_1000_steps", |b| {
        b.iter(|| map.rollout(black_box(&s), 1000).unwrap())
    });
    g.finish();
}

fn bench_training(c: &mut Criterion) {
    let mut g = c.benchmark_group("training");
    let ds = kepler_dataset(50, 11);
    let pairs = extract_pairs(&ds);
    let net = ParamNet::xavier(&[4, 64, 64, 1], Activation::Tanh, 7).unwrap();
    let batch = &pairs[..200];
    g.bench_function("loss_grad_batch_200", |b| {
        b.iter(|| loss_param_grad(black_box(&net), black_box(batch), 0.1).unwrap())
    });
    g.sample_size(10);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    g.bench_function("epoch_950_pairs", |b| {
        b.iter_batched(
            || net.clone(),
            |n0| train_gfnn(black_box(&pairs), n0, 0.1, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn bench_diagnostics(c: &mut Criterion) {
    let mut g = c.benchmark_group("diagnostics");
    let map = net_map(0.1);
    let s = circular_orbit();
    g.bench_function("symplecticity_defect", |b| {
        b.iter(|| map.symplecticity_defect(black_box(&s)).unwrap())
    });
    g.finish();
}

fn bench_dataset(c: &mut Criterion) {
    let mut g = c.benchmark_group("dataset");
    g.sample_size(20);
    g.bench_function("generate_kepler_50x20", |b| {
        b.iter(|| kepler_dataset(black_box(50), 11))
    });
    g.finish();
}

criterion_group!(
    benches,
    bench_step,
    bench_rollout,
    bench_training,
    bench_diagnostics,
    bench_dataset
);
criterion_main!(benches);
