use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvdlm::sampling::{domain, stream_rng};
use mvdlm::{
    generate_phantom, map_subject, run_filter, Algorithm, EffectKind, MapOptions, ModelConfig,
    PhantomSpec, Region, SamplerPlan, VoxelSampler,
};
use mvdlm_bench::fixture;
use nalgebra::DMatrix;

const SCANS: usize = 200;

fn series(cols: &[Vec<f64>], q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(SCANS, q, |t, c| cols[c][t])
}

fn filter(c: &mut Criterion) {
    let (design, cols) = fixture(SCANS, 19);
    let cfg = ModelConfig::new(1).with_burn_in(10);
    let mut group = c.benchmark_group("filter");
    for q in [1, 7, 19] {
        let y = series(&cols, q);
        group.bench_with_input(BenchmarkId::from_parameter(q), &y, |b, y| {
            b.iter(|| run_filter(black_box(y), &design, &cfg).unwrap())
        });
    }
    group.finish();
}

fn plan(c: &mut Criterion) {
    let (design, _) = fixture(SCANS, 1);
    let cfg = ModelConfig::new(1).with_burn_in(10);
    c.bench_function("plan", |b| {
        b.iter(|| SamplerPlan::new(black_box(&design), &cfg).unwrap())
    });
}

fn samplers(c: &mut Criterion) {
    let (design, cols) = fixture(SCANS, 7);
    let cfg = ModelConfig::new(1).with_burn_in(10);
    let plan = SamplerPlan::new(&design, &cfg).unwrap();
    let seq = run_filter(&series(&cols, 7), &design, &cfg).unwrap();
    let mut group = c.benchmark_group("path");
    for alg in [Algorithm::Fest, Algorithm::Fsts, Algorithm::Ffbs] {
        for kind in [EffectKind::Marginal, EffectKind::Joint] {
            let mut sampler = VoxelSampler::new(alg, &plan, &seq, kind).unwrap();
            let mut rng = stream_rng(0, domain::SAMPLER, 0);
            group.bench_function(format!("{alg}/{kind:?}"), |b| {
                b.iter(|| {
                    sampler
                        .draw_into(&mut rng, &mut |_: usize, theta: &[f64]| {
                            black_box(theta);
                            true
                        })
                        .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn subject_map(c: &mut Criterion) {
    let (design, _) = fixture(120, 1);
    let spec = PhantomSpec {
        dims: [8, 8, 4],
        regions: vec![Region {
            center: [3, 3, 2],
            radius: 2.0,
            effect: 1.0,
            task: 0,
        }],
        snr: 3.0,
        noise: Default::default(),
        baseline: 100.0,
        voxel_size: [3.0; 3],
        seed: 2,
    };
    let vol = generate_phantom(&spec, &design).unwrap().volume;
    let cfg = ModelConfig::new(1).with_burn_in(10);
    let mut group = c.benchmark_group("map_256_voxels");
    group.sample_size(10);
    for alg in [Algorithm::Fest, Algorithm::Ffbs] {
        let opts = MapOptions {
            algorithm: alg,
            n_draws: 200,
            workers: 1,
            ..Default::default()
        };
        group.bench_function(alg.to_string(), |b| {
            b.iter(|| map_subject(&vol, &design, &cfg, &opts, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, filter, plan, samplers, subject_map);
criterion_main!(benches);
