//! Forward filtering, backward sampling: `P'ΣP` from its inverse Wishart
//! posterior at `T`, `Θ_T` from the filtered law, then
//! `Θ_t | Θ_{t+1} ~ N(m_t + H_t (Θ_{t+1} - m_t), C*_t, Σ)` back to the first
//! retained time, with `H_t = C_t R_{t+1}⁻¹` and `C*_t = C_t - H_t C_t`.
//!
//! Retained times are visited in descending order.

use nalgebra::DMatrix;
use rand::Rng;

use super::evidence::EffectTrajectory;
use super::{
    add_kron, fill_normal, Algorithm, EffectKind, PathVisitor, SamplerPlan, SigmaLaw, VoxelSampler,
};
use crate::dlm::{ModelConfig, PosteriorSequence};
use crate::error::{Error, Result};
use crate::linalg::cholesky_lower;

pub(super) fn draw_path<R: Rng + ?Sized, V: PathVisitor + ?Sized>(
    s: &mut VoxelSampler<'_>,
    rng: &mut R,
    visitor: &mut V,
) -> Result<()> {
    let plan = s.plan;
    let post = &s.post;
    let sc = &mut s.scratch;
    let p = post.p;
    let drawn: DMatrix<f64>;
    let sigma_factor = match s.sigma.as_ref().expect("backward sampler has a scale law") {
        SigmaLaw::Random(iw) => {
            drawn = cholesky_lower(&iw.sample(rng))?;
            &drawn
        }
        SigmaLaw::Fixed(f) => f,
    };
    let t_end = plan.n_scans;
    sc.theta.copy_from_slice(post.m[t_end].as_slice());
    fill_normal(&mut sc.z, rng);
    add_kron(
        &mut sc.theta,
        &plan.c_factor[t_end],
        sigma_factor,
        &sc.z,
        &mut sc.tmp,
    );
    if !visitor.visit(t_end, &sc.theta) {
        return Ok(());
    }
    for t in (plan.burn_in..t_end).rev() {
        let m = post.m[t].as_slice();
        let h = &plan.smoother_gain[t];
        std::mem::swap(&mut sc.theta, &mut sc.next);
        for (k, v) in sc.next.iter_mut().enumerate() {
            *v -= m[k];
        }
        let d = sc.theta.len() / p;
        for j in 0..d {
            for i in 0..p {
                let mut acc = m[i + p * j];
                for a in 0..p {
                    acc += h[(i, a)] * sc.next[a + p * j];
                }
                sc.theta[i + p * j] = acc;
            }
        }
        fill_normal(&mut sc.z, rng);
        add_kron(
            &mut sc.theta,
            &plan.smoother_factor[t],
            sigma_factor,
            &sc.z,
            &mut sc.tmp,
        );
        if !visitor.visit(t, &sc.theta) {
            break;
        }
    }
    Ok(())
}

/// One backward-sampled trajectory of task `l` (0-based) at the retained
/// times.
pub fn ffbs_draw<R: Rng + ?Sized>(
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
    let mut sampler = VoxelSampler::new(Algorithm::Ffbs, &plan, posteriors, kind)?;
    let path = sampler.draw(rng)?;
    Ok(EffectTrajectory::from_path(
        &path,
        l,
        Algorithm::Ffbs,
        kind,
        0,
    ))
}
