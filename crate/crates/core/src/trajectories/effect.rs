//! Reductions of a task's state row to the quantity whose sign is tested.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dlm::PosteriorState;
use crate::error::{Error, Result};

/// Which function of a task's `1 x q` state row is tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    /// The cluster center alone.
    Marginal,
    /// The mean over the cluster.
    #[serde(alias = "average")]
    AverageCluster,
    /// The whole row.
    Joint,
}

impl EffectKind {
    pub const ALL: [EffectKind; 3] = [
        EffectKind::Marginal,
        EffectKind::AverageCluster,
        EffectKind::Joint,
    ];

    /// Dimension of the projected effect for a cluster of size `q`.
    pub fn dim(self, q: usize) -> usize {
        match self {
            EffectKind::Joint => q,
            _ => 1,
        }
    }

    /// Right projection `P` (`q x d`) such that the effect is `θ_l P`.
    pub fn projection(self, q: usize) -> DMatrix<f64> {
        match self {
            EffectKind::Marginal => {
                let mut p = DMatrix::zeros(q, 1);
                p[(0, 0)] = 1.0;
                p
            }
            EffectKind::AverageCluster => DMatrix::from_element(q, 1, 1.0 / q as f64),
            EffectKind::Joint => DMatrix::identity(q, q),
        }
    }

    /// `P' S P` without forming `P`.
    pub fn project_scale(self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let q = s.nrows();
        match self {
            EffectKind::Marginal => DMatrix::from_element(1, 1, s[(0, 0)]),
            EffectKind::AverageCluster => DMatrix::from_element(1, 1, s.sum() / (q * q) as f64),
            EffectKind::Joint => s.clone(),
        }
    }

    /// `m P` without forming `P`.
    pub fn project_location(self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let (p, q) = m.shape();
        match self {
            EffectKind::Marginal => m.columns(0, 1).into_owned(),
            EffectKind::AverageCluster => DMatrix::from_fn(p, 1, |i, _| m.row(i).sum() / q as f64),
            EffectKind::Joint => m.clone(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EffectKind::Marginal => "marginal",
            EffectKind::AverageCluster => "average",
            EffectKind::Joint => "joint",
        }
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EffectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "marginal" => Ok(EffectKind::Marginal),
            "average" | "average_cluster" | "averagecluster" => Ok(EffectKind::AverageCluster),
            "joint" => Ok(EffectKind::Joint),
            other => Err(Error::Parameter(format!(
                "unknown effect kind '{other}' (expected marginal, average or joint)"
            ))),
        }
    }
}

/// Normal law of one task's effect at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectDistribution {
    pub kind: EffectKind,
    pub task: usize,
    pub t: usize,
    /// Length `d`.
    pub mean: DVector<f64>,
    /// `d x d`.
    pub scale: DMatrix<f64>,
}

/// `θ_l P ~ N(m_l P, C_ll · P' S P)` for task `l` (0-based).
pub fn effect_projection(
    state: &PosteriorState,
    l: usize,
    kind: EffectKind,
) -> Result<EffectDistribution> {
    let p = state.p();
    if l >= p {
        return Err(Error::Parameter(format!(
            "task index {l} is out of range for {p} tasks"
        )));
    }
    let m = kind.project_location(&state.m);
    Ok(EffectDistribution {
        kind,
        task: l,
        t: 0,
        mean: m.row(l).transpose(),
        scale: kind.project_scale(&state.s) * state.c[(l, l)],
    })
}
