use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dsm_bench::{census_config, desk_pair, regularized_config};
use dsm_core::adam::{AdamConfig, AdamState};
use dsm_core::loss::{valid_mask, LossWeights, DEFAULT_MAX_DISPARITY};
use dsm_core::refine::{cspn_refine, normalize_affinities, DEFAULT_ITERATIONS, KERNEL_SIZE};
use dsm_core::regression::{entropy_matchability, soft_argmin};
use dsm_core::train::objective;
use dsm_core::volume::softmax_over_disparity;
use dsm_core::{match_pair, CostVolume, KernelMap, ParamSet, VolumeDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn regression(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dims = VolumeDims::new(16, 64, 128);
    let cost = CostVolume::new(dims, (0..dims.len()).map(|_| rng.gen_range(0.0..8.0)).collect()).unwrap();
    c.bench_function("softmax + soft-argmin + entropy 16x64x128", |b| {
        b.iter(|| {
            let p = softmax_over_disparity(black_box(&cost), 0.1).unwrap();
            (soft_argmin(&p).unwrap(), entropy_matchability(&p).unwrap())
        })
    });
}

fn propagation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (64, 128);
    let raw = (0..h * w * KERNEL_SIZE * KERNEL_SIZE).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let kernels = normalize_affinities(&KernelMap::new(h, w, KERNEL_SIZE, raw).unwrap());
    let d0 = desk_pair(1).disparity;
    c.bench_function("cspn 24 iterations 64x128", |b| {
        b.iter(|| cspn_refine(black_box(&d0), &kernels, DEFAULT_ITERATIONS).unwrap())
    });
}

fn matching(c: &mut Criterion) {
    let s = desk_pair(2);
    let cfg = census_config();
    let params = ParamSet::init(&cfg, 0);
    c.bench_function("match_pair census 64x128 D16", |b| {
        b.iter(|| match_pair(black_box(&s.left), &s.right, &cfg, &params).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let s = desk_pair(3);
    let cfg = regularized_config();
    let mask = valid_mask(&s.disparity, DEFAULT_MAX_DISPARITY);
    let mut params = ParamSet::init(&cfg, 0);
    let mut adam = AdamState::for_params(AdamConfig::default(), &params).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("objective + adam step 64x128 D16", |b| {
        b.iter(|| {
            params.zero_grad();
            let (loss, _) =
                objective(&mut params, &cfg, &s.left, &s.right, &s.disparity, &mask, LossWeights::default()).unwrap();
            adam.step(&mut params).unwrap();
            loss.total
        })
    });
    group.finish();
}

criterion_group!(benches, regression, propagation, matching, training_step);
criterion_main!(benches);
