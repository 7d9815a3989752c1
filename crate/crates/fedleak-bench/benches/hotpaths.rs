//! Hot paths: the training step, the closed-form readout, the inversion
//! inner loop, image scoring, and the occupancy oracle.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use fedleak_bench::{attack_fixture, classifier, image_batch};
use fedleak_core::gradmatch::grad_matching_loss;
use fedleak_core::lll::{leakage_stats, reconstruct, singleton_rate_mc};
use fedleak_core::metrics::{psnr, ssim, SsimCfg};
use fedleak_core::model::loss_and_param_grads;
use fedleak_core::GradMatchCfg;

fn bench_loss_and_grads(c: &mut Criterion) {
    let (spec, params) = classifier(16, 64, 1);
    let (_, x, y) = image_batch(32, 16, 2);
    c.bench_function("loss_and_param_grads/mlp16x64/batch32", |b| {
        b.iter(|| loss_and_param_grads(black_box(&spec), &params, &x, &y).unwrap())
    });
}

fn bench_reconstruct(c: &mut Criterion) {
    let (model, update, batch) = attack_fixture(512, 16, 3);
    c.bench_function("lll_reconstruct/k512/batch64", |b| {
        b.iter(|| reconstruct(black_box(&model), &update).unwrap())
    });
    let recs = reconstruct(&model, &update).unwrap();
    c.bench_function("leakage_stats/k512/batch64", |b| {
        b.iter(|| leakage_stats(black_box(&recs), &batch, 1.0, 45.0).unwrap())
    });
}

fn bench_grad_matching(c: &mut Criterion) {
    let (spec, params) = classifier(8, 32, 4);
    let (_, x, y) = image_batch(4, 8, 5);
    let (_, target) = loss_and_param_grads(&spec, &params, &x, &y).unwrap();
    let cfg = GradMatchCfg::default();
    c.bench_function("grad_matching_loss/mlp8x32/batch4", |b| {
        b.iter(|| grad_matching_loss(&spec, &params, black_box(&x), &y, &target, &cfg).unwrap())
    });
}

fn bench_metrics(c: &mut Criterion) {
    let (_, a, _) = image_batch(1, 28, 6);
    let (_, bb, _) = image_batch(1, 28, 7);
    c.bench_function("psnr/28x28", |b| b.iter(|| psnr(black_box(&a), &bb, 1.0).unwrap()));
    let cfg = SsimCfg::default();
    c.bench_function("ssim/28x28", |b| b.iter(|| ssim(black_box(&a), &bb, 1.0, &cfg).unwrap()));
}

fn bench_occupancy(c: &mut Criterion) {
    c.bench_function("singleton_rate_mc/k512/b64/10k", |b| {
        b.iter(|| singleton_rate_mc(black_box(512), 64, 10_000, 17))
    });
}

criterion_group!(
    benches,
    bench_loss_and_grads,
    bench_reconstruct,
    bench_grad_matching,
    bench_metrics,
    bench_occupancy
);
criterion_main!(benches);
