//! Forward estimated trajectories: per-task effects and observation noise are
//! drawn at every time, combined through the design into a synthetic series,
//! and the series is filtered again with the original configuration.
//!
//! The left-scale half of the filter does not depend on the data, so only the
//! location recursion `m̃_t = m̃_{t-1} + A_t (Ỹ_t - F_t' m̃_{t-1})` is rerun.

use rand::Rng;

use super::evidence::EffectTrajectory;
use super::{fill_normal, Algorithm, EffectKind, PathVisitor, SamplerPlan, VoxelSampler};
use crate::design::DesignMatrix;
use crate::dlm::{ModelConfig, PosteriorSequence};
use crate::error::{Error, Result};

pub(super) fn draw_path<R: Rng + ?Sized, V: PathVisitor + ?Sized>(
    s: &mut VoxelSampler<'_>,
    rng: &mut R,
    visitor: &mut V,
) -> Result<()> {
    let plan = s.plan;
    let post = &s.post;
    let sc = &mut s.scratch;
    let x = plan
        .design
        .as_ref()
        .ok_or_else(|| Error::Parameter("design is required".into()))?;
    let (p, d) = (post.p, post.d);
    let noise_sd = plan.v_scale.sqrt();
    // sc.next holds m̃ (p x d, column-major)
    sc.next.copy_from_slice(post.prior_m.as_slice());
    for t in 1..=plan.n_scans {
        let lf = &post.s_factor[t];
        let m = &post.m[t];
        fill_normal(&mut sc.z[..d], rng);
        for j in 0..d {
            sc.y[j] = noise_sd * (0..=j).map(|b| lf[(j, b)] * sc.z[b]).sum::<f64>();
        }
        for l in 0..p {
            let xl = x[(t - 1, l)];
            let sd = plan.c_diag(t, l).sqrt();
            fill_normal(&mut sc.z[..d], rng);
            for j in 0..d {
                let theta = m[(l, j)] + sd * (0..=j).map(|b| lf[(j, b)] * sc.z[b]).sum::<f64>();
                sc.y[j] += xl * theta;
            }
        }
        let a = plan.gain(t);
        for j in 0..d {
            let fitted: f64 = (0..p).map(|l| x[(t - 1, l)] * sc.next[l + p * j]).sum();
            sc.resid[j] = sc.y[j] - fitted;
        }
        for j in 0..d {
            for l in 0..p {
                sc.next[l + p * j] += a[l] * sc.resid[j];
            }
        }
        if t >= plan.burn_in && !visitor.visit(t, &sc.next) {
            break;
        }
    }
    Ok(())
}

/// One forward-estimated trajectory of task `l` (0-based) at the retained
/// times.
pub fn fest_draw<R: Rng + ?Sized>(
    posteriors: &PosteriorSequence,
    design: &DesignMatrix,
    cfg: &ModelConfig,
    l: usize,
    kind: EffectKind,
    rng: &mut R,
) -> Result<EffectTrajectory> {
    if l >= posteriors.p() {
        return Err(Error::Parameter(format!("task index {l} is out of range")));
    }
    let plan = SamplerPlan::from_sequence(posteriors, cfg, Some(design))?;
    let mut sampler = VoxelSampler::new(Algorithm::Fest, &plan, posteriors, kind)?;
    let path = sampler.draw(rng)?;
    Ok(EffectTrajectory::from_path(
        &path,
        l,
        Algorithm::Fest,
        kind,
        0,
    ))
}
