mod common;

use common::{block_design, normal};
use mvdlm::design::DesignMatrix;
use mvdlm::dlm::{discount_covariance, run_filter, ModelConfig, PosteriorSequence};
use mvdlm::group::{
    combine_voxel, group_combine, group_contrast, map_group, GroupSampler, SummaryCursor,
};
use mvdlm::sampling::stream_rng;
use mvdlm::trajectories::{map_subject, Algorithm, EffectKind, MapOptions, SamplerPlan};
use mvdlm::volume::summary::{SubjectSummary, SummaryMeta, VoxelSummary};
use mvdlm::volume::Bold4D;
use mvdlm::Error;
use nalgebra::DMatrix;

fn random_sequences(
    design: &DesignMatrix,
    cfg: &ModelConfig,
    q: usize,
    n: usize,
    seed: u64,
) -> Vec<PosteriorSequence> {
    let mut rng = stream_rng(seed, 0, 0);
    (0..n)
        .map(|_| {
            let b = DMatrix::from_fn(design.n_regressors(), q, |_, _| normal(&mut rng));
            let mut y = &design.values * b;
            y.iter_mut().for_each(|v| *v += normal(&mut rng));
            for t in 0..y.nrows() {
                for j in 1..q {
                    y[(t, j)] += 0.3 * y[(t, 0)];
                }
            }
            run_filter(&y, design, cfg).unwrap()
        })
        .collect()
}

fn two_task_design(n: usize) -> DesignMatrix {
    let a = block_design(n, 2.0, 10.0, 10.0);
    let b = block_design(n, 2.0, 20.0, 20.0);
    let x = DMatrix::from_fn(n, 2, |t, l| {
        if l == 0 {
            a.values[(t, 0)]
        } else {
            b.values[(t, 0)]
        }
    });
    DesignMatrix::new(x, 2.0, vec!["a".into(), "b".into()]).unwrap()
}

fn summaries(seqs: &[PosteriorSequence]) -> Vec<VoxelSummary> {
    seqs.iter()
        .map(|s| VoxelSummary::from_sequence(3, s))
        .collect()
}

#[test]
fn single_subject_group_is_the_subject_law() {
    let design = two_task_design(40);
    let cfg = ModelConfig::new(2).with_beta(0.9).with_burn_in(5);
    for kind in EffectKind::ALL {
        let seq = &random_sequences(&design, &cfg, 3, 1, 1)[0];
        let vs = VoxelSummary::from_sequence(3, seq);
        let g = combine_voxel(&[&vs], &cfg, kind).unwrap();
        let p = kind.projection(3);
        for t in 0..=40 {
            let st = seq.state(t);
            let mp = &st.m * &p;
            let sp = p.transpose() * &st.s * &p;
            assert!((&g.mean[t] - &mp).abs().max() < 1e-12);
            assert!((&g.noise[t] - &sp).abs().max() < 1e-12);
            for l in 0..2 {
                assert!((&g.scale[t][l] - &sp * st.c[(l, l)]).abs().max() < 1e-12);
            }
        }
    }
}

#[test]
fn identical_subjects_shrink_scale_by_group_size() {
    let design = two_task_design(30);
    let cfg = ModelConfig::new(2).with_beta(0.95).with_burn_in(3);
    let seq = &random_sequences(&design, &cfg, 7, 1, 2)[0];
    let vs = VoxelSummary::from_sequence(3, seq);
    let one = combine_voxel(&[&vs], &cfg, EffectKind::Joint).unwrap();
    let four = combine_voxel(&[&vs, &vs, &vs, &vs], &cfg, EffectKind::Joint).unwrap();
    let two = combine_voxel(&[&vs, &vs], &cfg, EffectKind::Joint).unwrap();
    for t in 0..=30 {
        assert!((&four.mean[t] - &one.mean[t]).abs().max() < 1e-12);
        for l in 0..2 {
            assert!((&four.scale[t][l] - &one.scale[t][l] / 4.0).abs().max() < 1e-12);
            assert!((&two.scale[t][l] - &one.scale[t][l] / 2.0).abs().max() < 1e-12);
            for i in 0..7 {
                assert!(four.scale[t][l][(i, i)] <= one.scale[t][l][(i, i)] / 4.0 + 1e-15);
            }
        }
    }
}

#[test]
fn combination_matches_elementwise_oracle() {
    let design = two_task_design(35);
    let cfg = ModelConfig::new(2).with_beta(0.85).with_burn_in(4);
    let seqs = random_sequences(&design, &cfg, 3, 3, 3);
    let vs = summaries(&seqs);
    let refs: Vec<&VoxelSummary> = vs.iter().collect();
    for kind in EffectKind::ALL {
        let g = combine_voxel(&refs, &cfg, kind).unwrap();
        let d = kind.dim(3);
        for t in 1..=35 {
            for l in 0..2 {
                for i in 0..d {
                    // element (i, j) of P'SP written out per kind
                    let proj = |s: &DMatrix<f64>, i: usize, j: usize| match kind {
                        EffectKind::Marginal => s[(0, 0)],
                        EffectKind::AverageCluster => s.iter().sum::<f64>() / 9.0,
                        EffectKind::Joint => s[(i, j)],
                    };
                    let loc = |m: &DMatrix<f64>| match kind {
                        EffectKind::Marginal => m[(l, 0)],
                        EffectKind::AverageCluster => (m[(l, 0)] + m[(l, 1)] + m[(l, 2)]) / 3.0,
                        EffectKind::Joint => m[(l, i)],
                    };
                    let mean = seqs.iter().map(|s| loc(&s.state(t).m)).sum::<f64>() / 3.0;
                    assert!((g.mean[t][(l, i)] - mean).abs() < 1e-12);
                    for j in 0..d {
                        let mut scale = 0.0;
                        let mut innov = 0.0;
                        let mut noise = 0.0;
                        for s in &seqs {
                            let st = s.state(t);
                            let (w, _) = discount_covariance(&s.state(t - 1).c, &cfg.beta).unwrap();
                            scale += st.c[(l, l)] * proj(&st.s, i, j);
                            innov += w[(l, l)] * proj(&st.s, i, j);
                            noise += proj(&st.s, i, j);
                        }
                        assert!((g.scale[t][l][(i, j)] - scale / 9.0).abs() < 1e-12);
                        assert!((g.innovation[t][l][(i, j)] - innov / 9.0).abs() < 1e-12);
                        assert!((g.noise[t][(i, j)] - noise / 9.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn combination_ignores_subject_order() {
    let design = two_task_design(25);
    let cfg = ModelConfig::new(2).with_beta(0.9).with_burn_in(2);
    let vs = summaries(&random_sequences(&design, &cfg, 3, 4, 4));
    let fwd: Vec<&VoxelSummary> = vs.iter().collect();
    let rev: Vec<&VoxelSummary> = vs.iter().rev().collect();
    let a = combine_voxel(&fwd, &cfg, EffectKind::Joint).unwrap();
    let b = combine_voxel(&rev, &cfg, EffectKind::Joint).unwrap();
    for t in 0..=25 {
        assert!((&a.mean[t] - &b.mean[t]).abs().max() < 1e-12);
        assert!((&a.noise[t] - &b.noise[t]).abs().max() < 1e-12);
        for l in 0..2 {
            assert!((&a.scale[t][l] - &b.scale[t][l]).abs().max() < 1e-12);
        }
    }
}

#[test]
fn contrast_laws() {
    let design = two_task_design(25);
    let cfg = ModelConfig::new(2).with_beta(0.9).with_burn_in(2);
    let vs = summaries(&random_sequences(&design, &cfg, 3, 4, 5));
    let a = combine_voxel(&[&vs[0], &vs[1]], &cfg, EffectKind::AverageCluster).unwrap();
    let b = combine_voxel(&[&vs[2], &vs[3]], &cfg, EffectKind::AverageCluster).unwrap();
    let ab = group_contrast(&a, &b).unwrap();
    let ba = group_contrast(&b, &a).unwrap();
    let aa = group_contrast(&a, &a).unwrap();
    let mut zero = b.clone();
    zero.mean.iter_mut().for_each(|m| m.fill(0.0));
    zero.scale.iter_mut().flatten().for_each(|m| m.fill(0.0));
    zero.innovation
        .iter_mut()
        .flatten()
        .for_each(|m| m.fill(0.0));
    zero.noise.iter_mut().for_each(|m| m.fill(0.0));
    let a0 = group_contrast(&a, &zero).unwrap();
    for t in 0..=25 {
        assert!((&ab.mean[t] + &ba.mean[t]).abs().max() < 1e-12);
        assert!(aa.mean[t].abs().max() < 1e-12);
        assert_eq!(a0.mean[t], a.mean[t]);
        for l in 0..2 {
            assert_eq!(ab.scale[t][l], ba.scale[t][l]);
            assert!((&aa.scale[t][l] - &a.scale[t][l] * 2.0).abs().max() < 1e-12);
            assert_eq!(a0.scale[t][l], a.scale[t][l]);
        }
    }
    let joint = combine_voxel(&[&vs[0]], &cfg, EffectKind::Joint).unwrap();
    assert!(matches!(
        group_contrast(&a, &joint),
        Err(Error::Metadata(_))
    ));
}

#[test]
fn single_subject_backward_sampler_reproduces_subject_draws() {
    let design = two_task_design(30);
    let cfg = ModelConfig::new(2).with_beta(0.9).with_burn_in(10);
    let seq = &random_sequences(&design, &cfg, 3, 1, 6)[0];
    let vs = VoxelSummary::from_sequence(0, seq);
    let plan = SamplerPlan::new(&design, &cfg).unwrap();
    let post = mvdlm::group::project_summary(&vs, &cfg, EffectKind::Joint).unwrap();
    let mut g = GroupSampler::from_subjects(&plan, vec![post], vec![]).unwrap();
    let mut s =
        mvdlm::trajectories::VoxelSampler::new(Algorithm::Ffbs, &plan, seq, EffectKind::Joint)
            .unwrap();
    let (mut r1, mut r2) = (stream_rng(7, 1, 1), stream_rng(7, 1, 1));
    for _ in 0..5 {
        let a = g.draw(&mut r1).unwrap();
        let b = s.draw(&mut r2).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs().max() < 1e-12);
        }
    }
}

#[test]
fn group_forward_state_moments_match_combined_law() {
    let design = two_task_design(30);
    let cfg = ModelConfig::new(2).with_beta(0.9).with_burn_in(20);
    let vs = summaries(&random_sequences(&design, &cfg, 3, 3, 8));
    let refs: Vec<&VoxelSummary> = vs.iter().collect();
    let dist = combine_voxel(&refs, &cfg, EffectKind::Marginal).unwrap();
    let mut g = GroupSampler::from_distribution(Algorithm::Fsts, dist.clone(), None).unwrap();
    let mut rng = stream_rng(9, 0, 0);
    let n = 20_000;
    let draws: Vec<Vec<DMatrix<f64>>> = (0..n).map(|_| g.draw(&mut rng).unwrap()).collect();
    for (i, t) in (20..=30).enumerate() {
        for l in 0..2 {
            let xs: Vec<f64> = draws.iter().map(|d| d[i][(l, 0)]).collect();
            let (m, v) = common::moments(&xs);
            let var = dist.scale[t - 1][l][(0, 0)] + dist.innovation[t][l][(0, 0)];
            let mean = dist.mean[t - 1][(l, 0)];
            assert!((m - mean).abs() < 4.0 * (var / n as f64).sqrt());
            assert!((v / var - 1.0).abs() < 0.05);
        }
    }
}

fn volume(dims: [usize; 3], design: &DesignMatrix, effect: f64, seed: u64, subject: u64) -> Bold4D {
    let n_vox: usize = dims.iter().product();
    let t_len = design.n_scans();
    let mut data = Vec::with_capacity(n_vox * t_len);
    for v in 0..n_vox {
        let mut rng = stream_rng(seed, subject, v as u64);
        for t in 0..t_len {
            data.push(effect * design.values[(t, 0)] + normal(&mut rng));
        }
    }
    Bold4D::new(dims, t_len, [3.0; 3], design.tr, data).unwrap()
}

fn fit(
    vol: &Bold4D,
    design: &DesignMatrix,
    cfg: &ModelConfig,
    opts: &MapOptions,
) -> (Vec<f64>, SubjectSummary) {
    let mut sink: Vec<VoxelSummary> = Vec::new();
    let maps = map_subject(vol, design, cfg, opts, Some(&mut sink)).unwrap();
    let meta = SummaryMeta::new(
        vol.dims,
        vol.voxel_size,
        design,
        opts.radius,
        cfg,
        opts.standardize,
    );
    (
        maps.maps[0].values.clone(),
        SubjectSummary { meta, voxels: sink },
    )
}

#[test]
fn single_subject_group_map_matches_subject_map() {
    let design = block_design(80, 2.0, 10.0, 10.0);
    let cfg = ModelConfig::new(1).with_beta(0.95).with_burn_in(10);
    let vol = volume([5, 2, 1], &design, 0.6, 11, 0);
    let opts = MapOptions {
        n_draws: 10_000,
        seed: 3,
        standardize: false,
        ..MapOptions::default()
    };
    for alg in Algorithm::ALL {
        let opts = MapOptions {
            algorithm: alg,
            ..opts.clone()
        };
        let (subject, summary) = fit(&vol, &design, &cfg, &opts);
        let mut src = vec![SummaryCursor::new(&summary)];
        let group = map_group(&mut src, &mut [], &opts).unwrap();
        assert_eq!(group.n_fitted, 10);
        for v in 0..10 {
            let (a, b) = (subject[v], group.maps[0].values[v]);
            let se = ((a * (1.0 - a) + b * (1.0 - b)) / 10_000.0).sqrt();
            assert!(
                (a - b).abs() <= 4.0 * se + 1e-3,
                "{alg} voxel {v}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn two_group_contrast_detects_stronger_group() {
    let design = block_design(80, 2.0, 10.0, 10.0);
    let cfg = ModelConfig::new(1).with_beta(0.95).with_burn_in(10);
    let opts = MapOptions {
        n_draws: 2000,
        seed: 5,
        standardize: false,
        ..MapOptions::default()
    };
    let group = |effect: f64, base: u64| -> Vec<SubjectSummary> {
        (0..4)
            .map(|s| {
                fit(
                    &volume([2, 1, 1], &design, effect, 21, base + s),
                    &design,
                    &cfg,
                    &opts,
                )
                .1
            })
            .collect()
    };
    let (ga, gb) = (group(3.0, 0), group(1.0, 100));
    let mut a: Vec<_> = ga.iter().map(SummaryCursor::new).collect();
    let mut b: Vec<_> = gb.iter().map(SummaryCursor::new).collect();
    let maps = map_group(&mut a, &mut b, &opts).unwrap();
    assert_eq!(maps.n_subjects, (4, 4));
    for v in 0..2 {
        assert!(
            maps.maps[0].values[v] > 0.95,
            "voxel {v}: {}",
            maps.maps[0].values[v]
        );
    }
    // reversed contrast has no evidence
    let mut a: Vec<_> = ga.iter().map(SummaryCursor::new).collect();
    let mut b: Vec<_> = gb.iter().map(SummaryCursor::new).collect();
    let rev = map_group(&mut b, &mut a, &opts).unwrap();
    assert!(rev.maps[0].values.iter().all(|&e| e < 0.05));
}

fn homogeneous_group(effect: f64, n_draws: usize) -> Vec<(Algorithm, Vec<Vec<f64>>, Vec<f64>)> {
    let design = block_design(80, 2.0, 10.0, 10.0);
    let cfg = ModelConfig::new(1).with_beta(0.95).with_burn_in(10);
    Algorithm::ALL
        .iter()
        .map(|&algorithm| {
            let opts = MapOptions {
                algorithm,
                n_draws,
                seed: 8,
                standardize: false,
                ..MapOptions::default()
            };
            let fits: Vec<_> = (0..5)
                .map(|s| {
                    fit(
                        &volume([3, 1, 1], &design, effect, 31, s),
                        &design,
                        &cfg,
                        &opts,
                    )
                })
                .collect();
            let summaries: Vec<SubjectSummary> = fits.iter().map(|f| f.1.clone()).collect();
            let mut src: Vec<_> = summaries.iter().map(SummaryCursor::new).collect();
            let group = map_group(&mut src, &mut [], &opts).unwrap();
            (
                algorithm,
                fits.into_iter().map(|f| f.0).collect(),
                group.maps[0].values.clone(),
            )
        })
        .collect()
}

#[test]
fn homogeneous_group_is_at_least_as_confident_as_its_members() {
    let n = 4000;
    for (alg, subjects, group) in homogeneous_group(1.5, n) {
        for v in 0..3 {
            let best = subjects.iter().map(|s| s[v]).fold(0.0, f64::max);
            let se = (best * (1.0 - best) / n as f64).sqrt();
            assert!(
                group[v] >= best - 4.0 * se - 1e-3,
                "{alg} voxel {v}: {} < {best}",
                group[v]
            );
        }
    }
}

#[test]
fn weak_common_activation_is_sharpened_by_pooling() {
    for (alg, subjects, group) in homogeneous_group(0.5, 4000) {
        for v in 0..3 {
            let mean = subjects.iter().map(|s| s[v]).sum::<f64>() / subjects.len() as f64;
            assert!(group[v] > mean, "{alg} voxel {v}: {} <= {mean}", group[v]);
        }
    }
}

#[test]
fn null_groups_rarely_differ() {
    let design = block_design(80, 2.0, 10.0, 10.0);
    let cfg = ModelConfig::new(1).with_beta(0.95).with_burn_in(10);
    let opts = MapOptions {
        n_draws: 500,
        seed: 9,
        ..MapOptions::default()
    };
    let group = |base: u64| -> Vec<SubjectSummary> {
        (0..3)
            .map(|s| {
                fit(
                    &volume([5, 5, 4], &design, 0.0, 41, base + s),
                    &design,
                    &cfg,
                    &opts,
                )
                .1
            })
            .collect()
    };
    let (ga, gb) = (group(0), group(10));
    let mut a: Vec<_> = ga.iter().map(SummaryCursor::new).collect();
    let mut b: Vec<_> = gb.iter().map(SummaryCursor::new).collect();
    let maps = map_group(&mut a, &mut b, &opts).unwrap();
    let active = maps.maps[0].values.iter().filter(|&&e| e > 0.95).count();
    assert!(
        active as f64 / 100.0 <= 0.05,
        "{active} of 100 voxels active"
    );
}

#[test]
fn heterogeneous_designs_need_forward_state_sampling() {
    let cfg = ModelConfig::new(1).with_beta(0.95).with_burn_in(10);
    let d1 = block_design(60, 2.0, 10.0, 10.0);
    let d2 = block_design(60, 2.0, 12.0, 8.0);
    let opts = MapOptions {
        n_draws: 100,
        standardize: false,
        ..MapOptions::default()
    };
    let s1 = fit(&volume([2, 1, 1], &d1, 1.0, 1, 0), &d1, &cfg, &opts).1;
    let s2 = fit(&volume([2, 1, 1], &d2, 1.0, 1, 1), &d2, &cfg, &opts).1;
    for alg in [Algorithm::Fest, Algorithm::Ffbs] {
        let mut src = vec![SummaryCursor::new(&s1), SummaryCursor::new(&s2)];
        let o = MapOptions {
            algorithm: alg,
            ..opts.clone()
        };
        match map_group(&mut src, &mut [], &o) {
            Err(Error::Unsupported(msg)) => assert!(msg.contains("FSTS")),
            other => panic!("{alg}: expected an unsupported-combination error, got {other:?}"),
        }
    }
    let mut src = vec![SummaryCursor::new(&s1), SummaryCursor::new(&s2)];
    let o = MapOptions {
        algorithm: Algorithm::Fsts,
        ..opts.clone()
    };
    assert_eq!(map_group(&mut src, &mut [], &o).unwrap().n_fitted, 2);
}

#[test]
fn incompatible_summaries_are_rejected() {
    let cfg = ModelConfig::new(1).with_beta(0.95).with_burn_in(10);
    let design = block_design(60, 2.0, 10.0, 10.0);
    let opts = MapOptions {
        n_draws: 10,
        ..MapOptions::default()
    };
    let s1 = fit(&volume([2, 1, 1], &design, 1.0, 1, 0), &design, &cfg, &opts).1;
    let other_cfg = ModelConfig::new(1).with_beta(0.8).with_burn_in(10);
    let s2 = fit(
        &volume([2, 1, 1], &design, 1.0, 1, 1),
        &design,
        &other_cfg,
        &opts,
    )
    .1;
    let s3 = fit(&volume([3, 1, 1], &design, 1.0, 1, 1), &design, &cfg, &opts).1;
    for bad in [&s2, &s3] {
        let mut src = vec![SummaryCursor::new(&s1), SummaryCursor::new(bad)];
        assert!(matches!(
            map_group(&mut src, &mut [], &opts),
            Err(Error::Metadata(_))
        ));
        assert!(matches!(
            group_combine(&[s1.clone(), bad.clone()], EffectKind::Marginal),
            Err(Error::Metadata(_))
        ));
    }
}

#[test]
fn combine_uses_voxels_common_to_all_subjects() {
    let cfg = ModelConfig::new(1).with_beta(0.95).with_burn_in(10);
    let design = block_design(60, 2.0, 10.0, 10.0);
    let opts = MapOptions {
        n_draws: 10,
        ..MapOptions::default()
    };
    let s1 = fit(&volume([4, 1, 1], &design, 1.0, 1, 0), &design, &cfg, &opts).1;
    let mut s2 = fit(&volume([4, 1, 1], &design, 1.0, 1, 1), &design, &cfg, &opts).1;
    s2.voxels.retain(|v| v.index != 1);
    let g = group_combine(&[s1, s2], EffectKind::Marginal).unwrap();
    let idx: Vec<usize> = g.iter().map(|d| d.index).collect();
    assert_eq!(idx, vec![0, 2, 3]);
    assert!(g.iter().all(|d| d.n_subjects == 2));
}
