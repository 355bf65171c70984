//! Monte Carlo activation evidence.
//!
//! A trajectory counts as positive only when every element, at every
//! retained time and (for the joint effect) every cluster component, is
//! strictly greater than zero.

use nalgebra::DMatrix;
use rand::Rng;

use super::{Algorithm, EffectKind, PathVisitor, VoxelSampler};
use crate::error::{Error, Result};

/// Effect of one task along the retained times of one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectTrajectory {
    /// `(T - burn_in + 1) x d`, row `i` is time `start + i`.
    pub values: DMatrix<f64>,
    pub start: usize,
    pub task: usize,
    pub kind: EffectKind,
    pub algorithm: Algorithm,
    pub draw: usize,
}

impl EffectTrajectory {
    /// Row `l` of each `p x d` matrix of a path given in ascending time.
    pub fn from_path(
        path: &[DMatrix<f64>],
        l: usize,
        algorithm: Algorithm,
        kind: EffectKind,
        draw: usize,
    ) -> Self {
        let d = path.first().map_or(0, |m| m.ncols());
        let values = DMatrix::from_fn(path.len(), d, |i, j| path[i][(l, j)]);
        Self {
            values,
            start: 0,
            task: l,
            kind,
            algorithm,
            draw,
        }
    }

    pub fn all_positive(&self) -> bool {
        self.values.iter().all(|&v| v > 0.0)
    }
}

/// Estimated probability that a whole trajectory is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceResult {
    pub probability: f64,
    pub n_draws: usize,
    pub task: usize,
    /// Second task of a contrast `task - other`.
    pub other: Option<usize>,
    pub kind: EffectKind,
    pub algorithm: Algorithm,
}

/// Fraction of draws whose trajectory is positive everywhere.
pub fn evidence(draws: &[EffectTrajectory]) -> Result<EvidenceResult> {
    let first = draws
        .first()
        .ok_or_else(|| Error::Parameter("evidence needs at least one draw".into()))?;
    if draws
        .iter()
        .any(|d| d.values.shape() != first.values.shape())
    {
        return Err(Error::Parameter(
            "trajectories have inconsistent shapes".into(),
        ));
    }
    let hits = draws.iter().filter(|d| d.all_positive()).count();
    Ok(EvidenceResult {
        probability: hits as f64 / draws.len() as f64,
        n_draws: draws.len(),
        task: first.task,
        other: None,
        kind: first.kind,
        algorithm: first.algorithm,
    })
}

/// Fraction of paired draws `k` with `a_k - b_k` positive everywhere.
pub fn contrast_evidence(a: &[EffectTrajectory], b: &[EffectTrajectory]) -> Result<EvidenceResult> {
    if a.is_empty() {
        return Err(Error::Parameter("evidence needs at least one draw".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "{} draws cannot be paired with {}",
            a.len(),
            b.len()
        )));
    }
    let shape = a[0].values.shape();
    if a.iter().chain(b).any(|d| d.values.shape() != shape) {
        return Err(Error::Parameter(
            "trajectories have inconsistent shapes".into(),
        ));
    }
    let hits = a
        .iter()
        .zip(b)
        .filter(|(x, y)| {
            x.values
                .iter()
                .zip(y.values.iter())
                .all(|(u, v)| u - v > 0.0)
        })
        .count();
    Ok(EvidenceResult {
        probability: hits as f64 / a.len() as f64,
        n_draws: a.len(),
        task: a[0].task,
        other: Some(b[0].task),
        kind: a[0].kind,
        algorithm: a[0].algorithm,
    })
}

/// Draws `n` trajectories of every task from one sampler.
pub fn draw_trajectories<R: Rng + ?Sized>(
    sampler: &mut VoxelSampler<'_>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<EffectTrajectory>>> {
    let p = sampler.p();
    let kind = sampler.posterior().kind;
    let start = sampler.plan().burn_in;
    let mut out = vec![Vec::with_capacity(n); p];
    for k in 0..n {
        let path = sampler.draw(rng)?;
        for (l, per_task) in out.iter_mut().enumerate() {
            let mut tr = EffectTrajectory::from_path(&path, l, sampler.algorithm, kind, k);
            tr.start = start;
            per_task.push(tr);
        }
    }
    Ok(out)
}

/// What a streaming count is tallying.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceTarget {
    Task(usize),
    /// `first - second`.
    Contrast(usize, usize),
}

/// Streaming evidence for several targets over shared draws. A draw ends as
/// soon as every target has seen a non-positive element.
#[derive(Debug, Clone)]
pub struct EvidenceCounter {
    p: usize,
    targets: Vec<EvidenceTarget>,
    alive: Vec<bool>,
    hits: Vec<u64>,
    draws: u64,
}

impl EvidenceCounter {
    pub fn new(p: usize, targets: Vec<EvidenceTarget>) -> Self {
        let n = targets.len();
        Self {
            p,
            targets,
            alive: vec![true; n],
            hits: vec![0; n],
            draws: 0,
        }
    }

    /// Runs `n` draws of `sampler`.
    pub fn run<R: Rng + ?Sized>(
        &mut self,
        sampler: &mut VoxelSampler<'_>,
        n: usize,
        rng: &mut R,
    ) -> Result<()> {
        for _ in 0..n {
            self.alive.iter_mut().for_each(|a| *a = true);
            sampler.draw_into(rng, self)?;
            self.finish_draw();
        }
        Ok(())
    }

    pub fn finish_draw(&mut self) {
        for (h, &a) in self.hits.iter_mut().zip(&self.alive) {
            *h += u64::from(a);
        }
        self.draws += 1;
        self.alive.iter_mut().for_each(|a| *a = true);
    }

    pub fn n_draws(&self) -> u64 {
        self.draws
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.hits
            .iter()
            .map(|&h| {
                if self.draws == 0 {
                    0.0
                } else {
                    h as f64 / self.draws as f64
                }
            })
            .collect()
    }
}

impl PathVisitor for EvidenceCounter {
    fn visit(&mut self, _t: usize, theta: &[f64]) -> bool {
        let p = self.p;
        let d = theta.len() / p;
        let mut any = false;
        for (target, alive) in self.targets.iter().zip(self.alive.iter_mut()) {
            if !*alive {
                continue;
            }
            *alive = match *target {
                EvidenceTarget::Task(l) => (0..d).all(|j| theta[l + p * j] > 0.0),
                EvidenceTarget::Contrast(a, b) => {
                    (0..d).all(|j| theta[a + p * j] - theta[b + p * j] > 0.0)
                }
            };
            any |= *alive;
        }
        any
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(values: &[f64], draw: usize) -> EffectTrajectory {
        EffectTrajectory {
            values: DMatrix::from_column_slice(values.len(), 1, values),
            start: 1,
            task: 0,
            kind: EffectKind::Marginal,
            algorithm: Algorithm::Fest,
            draw,
        }
    }

    #[test]
    fn all_positive_gives_one() {
        let d: Vec<_> = (0..4).map(|k| traj(&[1.0, 2.0, 0.1], k)).collect();
        assert_eq!(evidence(&d).unwrap().probability, 1.0);
    }

    #[test]
    fn half_positive_gives_half() {
        let d = vec![
            traj(&[1.0, 2.0], 0),
            traj(&[1.0, -2.0], 1),
            traj(&[3.0, 2.0], 2),
            traj(&[-1.0, 2.0], 3),
        ];
        assert_eq!(evidence(&d).unwrap().probability, 0.5);
    }

    #[test]
    fn zero_is_not_positive() {
        let d = vec![traj(&[1.0, 0.0, 2.0], 0)];
        assert_eq!(evidence(&d).unwrap().probability, 0.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(evidence(&[]).is_err());
        assert!(contrast_evidence(&[], &[]).is_err());
    }

    #[test]
    fn contrast_of_identical_draws_is_zero() {
        let a: Vec<_> = (0..5).map(|k| traj(&[k as f64, 1.0], k)).collect();
        assert_eq!(contrast_evidence(&a, &a).unwrap().probability, 0.0);
    }

    #[test]
    fn shifted_contrast_is_one() {
        let b: Vec<_> = (0..5).map(|k| traj(&[k as f64 - 3.0, 1.0], k)).collect();
        let a: Vec<_> = b
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.values.add_scalar_mut(10.0);
                t
            })
            .collect();
        assert_eq!(contrast_evidence(&a, &b).unwrap().probability, 1.0);
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let a = vec![traj(&[1.0, 2.0], 0)];
        let b = vec![traj(&[1.0], 0)];
        assert!(contrast_evidence(&a, &b).is_err());
        assert!(contrast_evidence(&a, &[]).is_err());
    }

    #[test]
    fn counter_matches_batch_rule() {
        let mut c = EvidenceCounter::new(
            2,
            vec![
                EvidenceTarget::Task(0),
                EvidenceTarget::Task(1),
                EvidenceTarget::Contrast(0, 1),
            ],
        );
        // column-major 2 x 1 matrices
        for path in [[[1.0, 0.5], [2.0, 1.0]], [[1.0, -0.5], [2.0, 3.0]]] {
            for (t, theta) in path.iter().enumerate() {
                if !c.visit(t, theta) {
                    break;
                }
            }
            c.finish_draw();
        }
        assert_eq!(c.probabilities(), vec![1.0, 0.5, 0.5]);
    }
}
