//! Trajectory samplers and Monte Carlo activation evidence.
//!
//! All three samplers act on the right projection `Θ P` of the state, where
//! `P` is the `q x d` matrix of the chosen [`EffectKind`]. Because
//! `Θ ~ N(m, C, Σ)` implies `Θ P ~ N(m P, C, P' Σ P)`, and the same holds for
//! the evolution and smoothing laws, this gives the same trajectories in
//! distribution as sampling the full `p x q` state and projecting afterwards,
//! at a fraction of the cost.

pub mod effect;
pub mod evidence;
pub mod fest;
pub mod ffbs;
pub mod fsts;
pub mod map;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::dlm::{discount_covariance, CovarianceSchedule, ModelConfig, PosteriorSequence};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, psd_factor_scaled, spd_inverse, symmetrize};
use crate::sampling::InverseWishart;

pub use effect::{effect_projection, EffectDistribution, EffectKind};
pub use evidence::{contrast_evidence, evidence, EffectTrajectory, EvidenceResult};
pub use fest::fest_draw;
pub use ffbs::ffbs_draw;
pub use fsts::fsts_draw;
pub use map::{
    map_subject, model_design, voxel_evidence, EvidenceVolume, MapOptions, SubjectMaps,
    VoxelFailure,
};

pub const DEFAULT_DRAWS: usize = 1000;
pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Trajectory sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Forward estimated trajectories: re-filter data synthesized from
    /// posterior draws.
    Fest,
    /// Forward state trajectories: one evolution step from a posterior draw.
    Fsts,
    /// Forward filtering, backward sampling.
    Ffbs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Fest, Algorithm::Fsts, Algorithm::Ffbs];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fest => "fest",
            Algorithm::Fsts => "fsts",
            Algorithm::Ffbs => "ffbs",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fest" | "fets" => Ok(Algorithm::Fest),
            "fsts" => Ok(Algorithm::Fsts),
            "ffbs" => Ok(Algorithm::Ffbs),
            other => Err(Error::Parameter(format!(
                "unknown algorithm '{other}' (expected fest, fsts or ffbs)"
            ))),
        }
    }
}

/// Data-independent quantities shared by every voxel fitted with one design
/// and configuration: factors of `C_t`, `W_t` and the smoothing laws, and
/// the filter gains.
#[derive(Debug, Clone)]
pub struct SamplerPlan {
    pub n_scans: usize,
    pub p: usize,
    pub burn_in: usize,
    pub v_scale: f64,
    /// Factor of `C_t`, `t = 0..=T`.
    c_factor: Vec<DMatrix<f64>>,
    /// `C_t`, `t = 0..=T`.
    c: Vec<DMatrix<f64>>,
    /// Factor of `W_t` at index `t`, `t = 1..=T` (index 0 unused).
    w_factor: Vec<DMatrix<f64>>,
    /// `W_t` at index `t`.
    w: Vec<DMatrix<f64>>,
    /// `H_t = C_t R_{t+1}⁻¹`, `t = 0..T`.
    smoother_gain: Vec<DMatrix<f64>>,
    /// Factor of `C*_t = C_t - C_t R_{t+1}⁻¹ C_t`, `t = 0..T`.
    smoother_factor: Vec<DMatrix<f64>>,
    /// `A_t` at index `t - 1`.
    gains: Vec<DVector<f64>>,
    /// Regressors, `T x p`, needed by the forward estimated sampler.
    design: Option<DMatrix<f64>>,
}

impl SamplerPlan {
    /// Plan for every voxel fitted with `design` and `cfg`.
    pub fn new(design: &DesignMatrix, cfg: &ModelConfig) -> Result<Self> {
        let sched = CovarianceSchedule::new(design, cfg)?;
        Self::from_parts(sched.c, sched.a, Some(design), cfg)
    }

    /// Plan built from one voxel's filtered left scales and gains.
    pub fn from_sequence(
        seq: &PosteriorSequence,
        cfg: &ModelConfig,
        design: Option<&DesignMatrix>,
    ) -> Result<Self> {
        let c = seq.states.iter().map(|s| s.c.clone()).collect();
        let a = seq.details.iter().map(|d| d.a.clone()).collect();
        Self::from_parts(c, a, design, cfg)
    }

    fn from_parts(
        c: Vec<DMatrix<f64>>,
        gains: Vec<DVector<f64>>,
        design: Option<&DesignMatrix>,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let n_scans = c.len() - 1;
        let p = cfg.p();
        if n_scans == 0 {
            return Err(Error::Parameter("no filtered time points".into()));
        }
        if cfg.burn_in > n_scans {
            return Err(Error::Parameter(format!(
                "burn-in {} exceeds the {n_scans} available time points",
                cfg.burn_in
            )));
        }
        if let Some(d) = design {
            if d.n_scans() != n_scans || d.n_regressors() != p {
                return Err(Error::Parameter(format!(
                    "design is {}x{} but the posteriors cover {n_scans} scans of {p} regressors",
                    d.n_scans(),
                    d.n_regressors()
                )));
            }
        }
        let c_factor = c.iter().map(cholesky_lower).collect::<Result<Vec<_>>>()?;
        let mut w = vec![DMatrix::zeros(p, p)];
        let mut w_factor = vec![DMatrix::zeros(p, p)];
        let mut smoother_gain = Vec::with_capacity(n_scans);
        let mut smoother_factor = Vec::with_capacity(n_scans);
        for t in 0..n_scans {
            let (wt, r) = discount_covariance(&c[t], &cfg.beta)?;
            let scale = c[t].abs().max();
            w_factor.push(psd_factor_scaled(&wt, scale)?);
            w.push(wt);
            let h = &c[t] * spd_inverse(&r)?;
            let mut cs = &c[t] - &h * &c[t];
            symmetrize(&mut cs);
            smoother_factor.push(psd_factor_scaled(&cs, scale)?);
            smoother_gain.push(h);
        }
        Ok(Self {
            n_scans,
            p,
            burn_in: cfg.burn_in,
            v_scale: cfg.v_scale,
            c_factor,
            c,
            w_factor,
            w,
            smoother_gain,
            smoother_factor,
            gains,
            design: design.map(|d| d.values.clone()),
        })
    }

    /// Number of retained times `T - burn_in + 1`.
    pub fn n_retained(&self) -> usize {
        self.n_scans - self.burn_in + 1
    }

    /// `C_t[l, l]`.
    pub fn c_diag(&self, t: usize, l: usize) -> f64 {
        self.c[t][(l, l)]
    }

    /// `W_t[l, l]`, `t ≥ 1`.
    pub fn w_diag(&self, t: usize, l: usize) -> f64 {
        self.w[t][(l, l)]
    }

    /// Filter gain `A_t`, `t ≥ 1`.
    pub fn gain(&self, t: usize) -> &DVector<f64> {
        &self.gains[t - 1]
    }

    pub fn design(&self) -> Option<&DMatrix<f64>> {
        self.design.as_ref()
    }
}

/// One voxel's filtered posteriors projected for a given effect kind.
#[derive(Debug, Clone)]
pub struct ProjectedPosterior {
    pub kind: EffectKind,
    pub p: usize,
    pub d: usize,
    /// `m_t P` (`p x d`), `t = 0..=T`.
    pub m: Vec<DMatrix<f64>>,
    /// `P' S_t P` (`d x d`), `t = 0..=T`.
    pub s: Vec<DMatrix<f64>>,
    /// Lower factors of `s`.
    pub s_factor: Vec<DMatrix<f64>>,
    pub n: Vec<f64>,
    /// `m_0 P`.
    pub prior_m: DMatrix<f64>,
}

impl ProjectedPosterior {
    pub fn new(seq: &PosteriorSequence, kind: EffectKind) -> Result<Self> {
        let m = seq
            .states
            .iter()
            .map(|st| kind.project_location(&st.m))
            .collect();
        let s: Vec<DMatrix<f64>> = seq
            .states
            .iter()
            .map(|st| kind.project_scale(&st.s))
            .collect();
        let s_factor = s.iter().map(cholesky_lower).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            p: seq.p(),
            d: kind.dim(seq.q()),
            prior_m: kind.project_location(&seq.states[0].m),
            m,
            s,
            s_factor,
            n: seq.states.iter().map(|st| st.n).collect(),
        })
    }

    pub fn n_scans(&self) -> usize {
        self.m.len() - 1
    }
}

/// Callback receiving `(t, Θ_t P)` with the matrix flattened column-major
/// (`p x d`); returning `false` ends the current draw early.
pub trait PathVisitor {
    fn visit(&mut self, t: usize, theta: &[f64]) -> bool;
}

impl<F: FnMut(usize, &[f64]) -> bool> PathVisitor for F {
    fn visit(&mut self, t: usize, theta: &[f64]) -> bool {
        self(t, theta)
    }
}

/// Draws trajectories of one voxel with a fixed algorithm.
pub struct VoxelSampler<'a> {
    pub algorithm: Algorithm,
    plan: &'a SamplerPlan,
    post: ProjectedPosterior,
    sigma: Option<SigmaLaw>,
    scratch: Scratch,
}

enum SigmaLaw {
    Random(InverseWishart),
    Fixed(DMatrix<f64>),
}

struct Scratch {
    z: Vec<f64>,
    tmp: Vec<f64>,
    theta: Vec<f64>,
    next: Vec<f64>,
    resid: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> VoxelSampler<'a> {
    pub fn new(
        algorithm: Algorithm,
        plan: &'a SamplerPlan,
        seq: &PosteriorSequence,
        kind: EffectKind,
    ) -> Result<Self> {
        if seq.len() != plan.n_scans || seq.p() != plan.p {
            return Err(Error::Parameter(format!(
                "posteriors cover {} scans of {} tasks but the plan expects {} of {}",
                seq.len(),
                seq.p(),
                plan.n_scans,
                plan.p
            )));
        }
        if algorithm == Algorithm::Fest && plan.design.is_none() {
            return Err(Error::Parameter(
                "the forward estimated sampler needs the design".into(),
            ));
        }
        let post = ProjectedPosterior::new(seq, kind)?;
        Self::from_projected(algorithm, plan, post)
    }

    pub fn from_projected(
        algorithm: Algorithm,
        plan: &'a SamplerPlan,
        post: ProjectedPosterior,
    ) -> Result<Self> {
        let sigma = match algorithm {
            Algorithm::Ffbs => {
                let t = post.n_scans();
                Some(SigmaLaw::Random(InverseWishart::new(
                    post.n[t], &post.s[t],
                )?))
            }
            _ => None,
        };
        let (p, d) = (post.p, post.d);
        let n = p * d;
        Ok(Self {
            algorithm,
            plan,
            scratch: Scratch {
                z: vec![0.0; n],
                tmp: vec![0.0; n],
                theta: vec![0.0; n],
                next: vec![0.0; n],
                resid: vec![0.0; d],
                y: vec![0.0; d],
            },
            post,
            sigma,
        })
    }

    /// Replaces the backward sampler's random `P'ΣP` by a fixed value.
    pub fn with_fixed_sigma(mut self, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.shape() != (self.post.d, self.post.d) {
            return Err(Error::Parameter(format!(
                "fixed scale is {:?}, expected {}x{}",
                sigma.shape(),
                self.post.d,
                self.post.d
            )));
        }
        self.sigma = Some(SigmaLaw::Fixed(cholesky_lower(&sigma)?));
        Ok(self)
    }

    pub fn plan(&self) -> &SamplerPlan {
        self.plan
    }

    pub fn posterior(&self) -> &ProjectedPosterior {
        &self.post
    }

    pub fn p(&self) -> usize {
        self.post.p
    }

    pub fn d(&self) -> usize {
        self.post.d
    }

    /// Runs one draw, feeding retained times to `visitor`.
    pub fn draw_into<R: Rng + ?Sized, V: PathVisitor + ?Sized>(
        &mut self,
        rng: &mut R,
        visitor: &mut V,
    ) -> Result<()> {
        match self.algorithm {
            Algorithm::Fest => fest::draw_path(self, rng, visitor),
            Algorithm::Fsts => fsts::draw_path(self, rng, visitor),
            Algorithm::Ffbs => ffbs::draw_path(self, rng, visitor),
        }
    }

    /// One full draw as `Θ_t P` matrices at retained times, ascending.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<DMatrix<f64>>> {
        let (p, d) = (self.p(), self.d());
        let burn_in = self.plan.burn_in;
        let mut out = vec![DMatrix::zeros(p, d); self.plan.n_retained()];
        self.draw_into(rng, &mut |t: usize, theta: &[f64]| {
            out[t - burn_in].copy_from_slice(theta);
            true
        })?;
        Ok(out)
    }
}

fn fill_normal<R: Rng + ?Sized>(buf: &mut [f64], rng: &mut R) {
    for v in buf.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// `out += L Z R'` for column-major `p x d` buffers, `L` (`p x p`) and a
/// lower-triangular `R` (`d x d`).
fn add_kron(
    out: &mut [f64],
    left: &DMatrix<f64>,
    right_lower: &DMatrix<f64>,
    z: &[f64],
    tmp: &mut [f64],
) {
    let p = left.nrows();
    let d = right_lower.nrows();
    // tmp = Z R'
    for j in 0..d {
        for i in 0..p {
            let mut acc = 0.0;
            for b in 0..=j {
                acc += z[i + p * b] * right_lower[(j, b)];
            }
            tmp[i + p * j] = acc;
        }
    }
    for j in 0..d {
        for i in 0..p {
            let mut acc = 0.0;
            for a in 0..p {
                acc += left[(i, a)] * tmp[a + p * j];
            }
            out[i + p * j] += acc;
        }
    }
}
