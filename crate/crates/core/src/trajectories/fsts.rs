//! Forward state trajectories: `Θ_t = Θ_{t-1} + Ω_t` with a fresh posterior
//! draw of `Θ_{t-1}` at every step and `Ω_t ~ N(0, W_t, S_t)`.

use rand::Rng;

use super::evidence::EffectTrajectory;
use super::{add_kron, fill_normal, Algorithm, EffectKind, PathVisitor, SamplerPlan, VoxelSampler};
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
    for t in plan.burn_in..=plan.n_scans {
        sc.theta.copy_from_slice(post.m[t - 1].as_slice());
        fill_normal(&mut sc.z, rng);
        add_kron(
            &mut sc.theta,
            &plan.c_factor[t - 1],
            &post.s_factor[t - 1],
            &sc.z,
            &mut sc.tmp,
        );
        fill_normal(&mut sc.z, rng);
        add_kron(
            &mut sc.theta,
            &plan.w_factor[t],
            &post.s_factor[t],
            &sc.z,
            &mut sc.tmp,
        );
        if !visitor.visit(t, &sc.theta) {
            break;
        }
    }
    Ok(())
}

/// One forward-state trajectory of task `l` (0-based) at the retained times.
pub fn fsts_draw<R: Rng + ?Sized>(
    posteriors: &PosteriorSequence,
    cfg: &ModelConfig,
    l: usize,
    kind: EffectKind,
    rng: &mut R,
) -> Result<EffectTrajectory> {
    if l >= posteriors.p() {
        return Err(Error::Parameter(format!("task index {l} is out of range")));
    }
    let plan = SamplerPlan::from_sequence(posteriors, cfg, None)?;
    let mut sampler = VoxelSampler::new(Algorithm::Fsts, &plan, posteriors, kind)?;
    let path = sampler.draw(rng)?;
    Ok(EffectTrajectory::from_path(
        &path,
        l,
        Algorithm::Fsts,
        kind,
        0,
    ))
}
