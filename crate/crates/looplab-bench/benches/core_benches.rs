use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use looplab_bench::{bench_model, bench_tokens};
use looplab_core::dynamics::{self, InjectionMode};
use looplab_core::fit::lbfgs::{minimize, LbfgsOptions};
use looplab_core::fit::{fit_ttc, FitOptions, TtcForm, TtcPoint};
use looplab_core::rng;
use looplab_core::sampling::{sample_corrected, DepthDistribution};
use looplab_core::tensor::Tensor;
use looplab_core::trainer::{sample_batch, train_step, AdamHyper, AdamState};
use looplab_core::{corpus::Corpus, sampling::DepthSchedule};

fn forward_pass(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for d in [32usize, 64] {
        let model = bench_model(d, InjectionMode::ParcaeDiagonal);
        let (input, _) = bench_tokens(128);
        let h0 = model.init_state(input.len(), 1);
        group.bench_with_input(BenchmarkId::new("parcae_t4", d), &d, |b, _| {
            b.iter(|| model.forward(black_box(&input), 4, &h0).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut model = bench_model(32, InjectionMode::ParcaeDiagonal);
    let mut adam = AdamState::new(&model);
    let text: Vec<u8> = (0..20_000).map(|i| b'a' + (i % 23) as u8).collect();
    let corpus = Corpus::from_bytes(&text);
    let schedule = DepthSchedule::per_sequence(4, 4, 2, DepthDistribution::Poisson, 3);
    let hyper = AdamHyper { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-10, weight_decay: 0.0 };
    c.bench_function("train_step_d32_b4", |b| {
        b.iter(|| {
            let batch = sample_batch(corpus.view(), 4, 64, 7).unwrap();
            train_step(&mut model, &mut adam, &batch, &schedule, &hyper, 1.0).unwrap()
        })
    });
}

fn spectral_radius(c: &mut Criterion) {
    let mut r = rng::stream(5);
    let m = Tensor::matrix(32, 32, rng::normal_vec(&mut r, 1024, 1.0)).unwrap();
    c.bench_function("spectral_radius_32", |b| {
        b.iter(|| dynamics::spectral_radius(black_box(&m)).unwrap())
    });
    c.bench_function("dense_spectral_radius_32", |b| {
        b.iter(|| dynamics::dense_spectral_radius(black_box(&m)).unwrap())
    });
}

fn depth_sampling(c: &mut Criterion) {
    c.bench_function("sample_corrected_10k", |b| {
        b.iter(|| {
            let mut r = rng::stream(11);
            let mut acc = 0u32;
            for _ in 0..10_000 {
                let (n, k) = sample_corrected(8, 4, DepthDistribution::Poisson, &mut r);
                acc += n + k;
            }
            acc
        })
    });
}

fn lbfgs_rosenbrock(c: &mut Criterion) {
    let f = |x: &[f64], g: &mut [f64]| {
        let (a, b) = (x[0], x[1]);
        g[0] = -400.0 * a * (b - a * a) - 2.0 * (1.0 - a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a) * (1.0 - a) + 100.0 * (b - a * a) * (b - a * a)
    };
    c.bench_function("lbfgs_rosenbrock", |b| {
        b.iter(|| minimize(&f, black_box(&[-1.2, 1.0]), &LbfgsOptions::default()))
    });
}

fn ttc_fit(c: &mut Criterion) {
    let points: Vec<TtcPoint> =
        (1..=24).map(|t| TtcPoint { t, loss: 3.0 + 1.5 * (-0.6 * t as f64).exp() }).collect();
    c.bench_function("fit_ttc_exp_decay_20_restarts", |b| {
        b.iter(|| fit_ttc(black_box(&points), TtcForm::ExpDecay, &FitOptions::quick(20, 1)).unwrap())
    });
}

criterion_group!(
    benches,
    forward_pass,
    training_step,
    spectral_radius,
    depth_sampling,
    lbfgs_rosenbrock,
    ttc_fit
);
criterion_main!(benches);
