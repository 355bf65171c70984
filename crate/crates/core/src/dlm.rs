//! Conjugate matrix-variate DLM filtering with discount-factor evolution.
//!
//! Observation `Y_t = F_t' Θ_t + ν_t`, `ν_t ~ N_q(0, V Σ)`; evolution
//! `Θ_t = Θ_{t-1} + Ω_t`, `Ω_t ~ N(0, W_t, Σ)`. The system variance is never
//! specified directly: `W_t = B C_{t-1} B - C_{t-1}` with
//! `B = diag(1/√β_i)`, so the prior left scale at `t` is `R_t = B C_{t-1} B`.

use nalgebra::{DMatrix, DVector};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// Forecast scales at or below this value are treated as degenerate.
pub const FORECAST_FLOOR: f64 = 1e-12;

pub const DEFAULT_BETA: f64 = 0.95;
pub const DEFAULT_PRIOR_C_SCALE: f64 = 100.0;
pub const DEFAULT_PRIOR_N: f64 = 1.0;
pub const DEFAULT_BURN_IN: usize = 30;

/// Normal/inverse-Wishart posterior `NW⁻¹_n[m, C, S]` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    /// Location, `p x q`.
    pub m: DMatrix<f64>,
    /// Left scale, `p x p`.
    pub c: DMatrix<f64>,
    /// Right scale / estimate of the cross-sectional covariance, `q x q`.
    pub s: DMatrix<f64>,
    /// Degrees of freedom.
    pub n: f64,
}

impl PosteriorState {
    pub fn p(&self) -> usize {
        self.m.nrows()
    }

    pub fn q(&self) -> usize {
        self.m.ncols()
    }

    /// Checks shapes, symmetry and positive definiteness of both scales.
    pub fn validate(&self) -> Result<()> {
        let (p, q) = self.m.shape();
        if self.c.shape() != (p, p) || self.s.shape() != (q, q) {
            return Err(Error::Parameter(format!(
                "posterior shapes m {:?}, C {:?}, S {:?} are inconsistent",
                self.m.shape(),
                self.c.shape(),
                self.s.shape()
            )));
        }
        if !(self.n > 0.0) {
            return Err(Error::Parameter(format!(
                "degrees of freedom {} must be positive",
                self.n
            )));
        }
        if !crate::linalg::is_spd(&self.c, 1e-10) || !crate::linalg::is_spd(&self.s, 1e-10) {
            return Err(Error::Parameter(
                "posterior scales must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }
}

/// Intermediate quantities of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStepDetail {
    /// One-step forecast mean `f_t = F_t' m_{t-1}` (length q).
    pub f: DVector<f64>,
    /// Forecast error `e_t = Y_t - f_t` (length q).
    pub e: DVector<f64>,
    /// Forecast scale `Q_t = V + F_t' R_t F_t`.
    pub q: f64,
    /// Adaptive gain `A_t = R_t F_t / Q_t` (length p).
    pub a: DVector<f64>,
    /// Prior left scale `R_t = B C_{t-1} B`.
    pub r: DMatrix<f64>,
    /// System variance `W_t = R_t - C_{t-1}`.
    pub w: DMatrix<f64>,
}

/// Priors, discount factors and the retained window.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// One discount factor per regressor, each in (0, 1].
    pub beta: Vec<f64>,
    /// Known observational scale `V`.
    pub v_scale: f64,
    /// Prior location `m_0` (`p x q`); zeros when `None`.
    pub prior_m: Option<DMatrix<f64>>,
    /// `C_0 = prior_c_scale · I_p`.
    pub prior_c_scale: f64,
    /// Prior right scale `S_0` (`q x q`); identity when `None`.
    pub prior_s: Option<DMatrix<f64>>,
    pub prior_n: f64,
    /// First retained time index `t_1` (1-based).
    pub burn_in: usize,
}

impl ModelConfig {
    /// Vague defaults for `p` regressors.
    pub fn new(p: usize) -> Self {
        Self {
            beta: vec![DEFAULT_BETA; p],
            v_scale: 1.0,
            prior_m: None,
            prior_c_scale: DEFAULT_PRIOR_C_SCALE,
            prior_s: None,
            prior_n: DEFAULT_PRIOR_N,
            burn_in: DEFAULT_BURN_IN,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta.iter_mut().for_each(|b| *b = beta);
        self
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(Error::Parameter(
                "at least one discount factor is required".into(),
            ));
        }
        check_betas(&self.beta)?;
        if !(self.v_scale > 0.0) || !self.v_scale.is_finite() {
            return Err(Error::Parameter(format!(
                "observational scale {} must be positive",
                self.v_scale
            )));
        }
        if !(self.prior_c_scale > 0.0) || !self.prior_c_scale.is_finite() {
            return Err(Error::Parameter(format!(
                "prior left scale {} must be positive",
                self.prior_c_scale
            )));
        }
        if !(self.prior_n > 0.0) || !self.prior_n.is_finite() {
            return Err(Error::Parameter(format!(
                "prior degrees of freedom {} must be positive",
                self.prior_n
            )));
        }
        if self.burn_in < 1 {
            return Err(Error::Parameter("burn-in must be at least 1".into()));
        }
        Ok(())
    }

    /// Prior `(m_0, C_0, S_0, n_0)` for a cluster of `q` series.
    pub fn initial_state(&self, q: usize) -> Result<PosteriorState> {
        self.validate()?;
        let p = self.p();
        let m = match &self.prior_m {
            Some(m) if m.shape() == (p, q) => m.clone(),
            Some(m) => {
                return Err(Error::Parameter(format!(
                    "prior location is {:?}, expected ({p}, {q})",
                    m.shape()
                )))
            }
            None => DMatrix::zeros(p, q),
        };
        let s = match &self.prior_s {
            Some(s) if s.shape() == (q, q) => s.clone(),
            Some(s) => {
                return Err(Error::Parameter(format!(
                    "prior right scale is {:?}, expected ({q}, {q})",
                    s.shape()
                )))
            }
            None => DMatrix::identity(q, q),
        };
        let state = PosteriorState {
            m,
            c: DMatrix::identity(p, p) * self.prior_c_scale,
            s,
            n: self.prior_n,
        };
        state.validate()?;
        Ok(state)
    }
}

fn check_betas(beta: &[f64]) -> Result<()> {
    for (i, &b) in beta.iter().enumerate() {
        if !(b > 0.0 && b <= 1.0) {
            return Err(Error::Parameter(format!(
                "discount factor beta[{i}] = {b} is outside (0, 1]"
            )));
        }
    }
    Ok(())
}

/// Discounted evolution of a left scale: `R = B C B`, `W = R - C`.
pub fn discount_covariance(c: &DMatrix<f64>, beta: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = c.nrows();
    if c.ncols() != p || beta.len() != p {
        return Err(Error::Parameter(format!(
            "left scale is {:?} but {} discount factors were given",
            c.shape(),
            beta.len()
        )));
    }
    check_betas(beta)?;
    let b: Vec<f64> = beta.iter().map(|x| 1.0 / x.sqrt()).collect();
    let mut r = DMatrix::from_fn(p, p, |i, j| c[(i, j)] * b[i] * b[j]);
    symmetrize(&mut r);
    let w = &r - c;
    Ok((w, r))
}

/// One conjugate update from `t-1` to `t`.
pub fn filter_step(
    state: &PosteriorState,
    y: &[f64],
    f_row: &[f64],
    cfg: &ModelConfig,
) -> Result<(PosteriorState, FilterStepDetail)> {
    let (p, q) = state.m.shape();
    if y.len() != q || f_row.len() != p {
        return Err(Error::Parameter(format!(
            "observation length {} / regressor length {} do not match q={q}, p={p}",
            y.len(),
            f_row.len()
        )));
    }
    if y.iter().chain(f_row).any(|v| !v.is_finite()) {
        return Err(Error::Data("observation or regressor is not finite".into()));
    }

    let (w, r) = discount_covariance(&state.c, &cfg.beta)?;
    let f = DVector::from_column_slice(f_row);
    let rf = &r * &f;
    let qt = cfg.v_scale + f.dot(&rf);
    if !(qt > FORECAST_FLOOR) || !qt.is_finite() {
        return Err(Error::DegenerateForecast { t: 0, q: qt });
    }
    let a = &rf / qt;
    let forecast = state.m.tr_mul(&f);
    let e = DVector::from_column_slice(y) - &forecast;

    let m = &state.m + &a * e.transpose();
    let mut c = &r - &a * a.transpose() * qt;
    symmetrize(&mut c);
    let n = state.n + 1.0;
    let mut s = (&state.s * state.n + &e * e.transpose() / qt) / n;
    symmetrize(&mut s);

    Ok((
        PosteriorState { m, c, s, n },
        FilterStepDetail {
            f: forecast,
            e,
            q: qt,
            a,
            r,
            w,
        },
    ))
}

/// Filtered posteriors for `t = 0..=T`.
#[derive(Debug, Clone)]
pub struct PosteriorSequence {
    /// `states[0]` is the prior; `states[t]` the posterior given `D_t`.
    pub states: Vec<PosteriorState>,
    /// `details[t - 1]` belongs to the update that produced `states[t]`.
    pub details: Vec<FilterStepDetail>,
}

impl PosteriorSequence {
    /// Number of observations `T`.
    pub fn len(&self) -> usize {
        self.details.len()
    }

    pub fn is_empty(&self) -> bool {
        self.details.is_empty()
    }

    /// Posterior at time `t` (`t = 0` is the prior).
    pub fn state(&self, t: usize) -> &PosteriorState {
        &self.states[t]
    }

    pub fn last(&self) -> &PosteriorState {
        self.states.last().expect("sequence always holds the prior")
    }

    pub fn p(&self) -> usize {
        self.states[0].p()
    }

    pub fn q(&self) -> usize {
        self.states[0].q()
    }
}

/// Runs [`filter_step`] over a `T x q` series.
pub fn run_filter(
    series: &DMatrix<f64>,
    design: &DesignMatrix,
    cfg: &ModelConfig,
) -> Result<PosteriorSequence> {
    let t_len = series.nrows();
    if design.n_scans() != t_len {
        return Err(Error::Parameter(format!(
            "series has {t_len} time points but the design has {}",
            design.n_scans()
        )));
    }
    if design.n_regressors() != cfg.p() {
        return Err(Error::Parameter(format!(
            "design has {} regressors but {} discount factors were configured",
            design.n_regressors(),
            cfg.p()
        )));
    }
    let q = series.ncols();
    let mut states = Vec::with_capacity(t_len + 1);
    let mut details = Vec::with_capacity(t_len);
    states.push(cfg.initial_state(q)?);
    let mut y = vec![0.0; q];
    for t in 0..t_len {
        for (j, v) in y.iter_mut().enumerate() {
            *v = series[(t, j)];
        }
        let f_row = design.row(t);
        let (next, detail) = filter_step(&states[t], &y, &f_row, cfg).map_err(|e| match e {
            Error::DegenerateForecast { q, .. } => Error::DegenerateForecast { t: t + 1, q },
            other => Error::FilterStep {
                t: t + 1,
                source: Box::new(other),
            },
        })?;
        states.push(next);
        details.push(detail);
    }
    Ok(PosteriorSequence { states, details })
}

/// The left-scale half of the filter, which never looks at the data: with a
/// fixed design and configuration every voxel shares the same `R_t`, `Q_t`,
/// `A_t` and `C_t`.
#[derive(Debug, Clone)]
pub struct CovarianceSchedule {
    /// `c[t]` for `t = 0..=T`, `c[0] = C_0`.
    pub c: Vec<DMatrix<f64>>,
    /// `r[t - 1] = R_t`.
    pub r: Vec<DMatrix<f64>>,
    /// `a[t - 1] = A_t`.
    pub a: Vec<DVector<f64>>,
    /// `q[t - 1] = Q_t`.
    pub q: Vec<f64>,
}

impl CovarianceSchedule {
    pub fn new(design: &DesignMatrix, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.p();
        if design.n_regressors() != p {
            return Err(Error::Parameter(format!(
                "design has {} regressors but {p} discount factors were configured",
                design.n_regressors()
            )));
        }
        let t_len = design.n_scans();
        let mut sched = Self {
            c: Vec::with_capacity(t_len + 1),
            r: Vec::with_capacity(t_len),
            a: Vec::with_capacity(t_len),
            q: Vec::with_capacity(t_len),
        };
        sched.c.push(DMatrix::identity(p, p) * cfg.prior_c_scale);
        for t in 0..t_len {
            let (_, r) = discount_covariance(&sched.c[t], &cfg.beta)?;
            let f = DVector::from_vec(design.row(t));
            let rf = &r * &f;
            let qt = cfg.v_scale + f.dot(&rf);
            if !(qt > FORECAST_FLOOR) {
                return Err(Error::DegenerateForecast { t: t + 1, q: qt });
            }
            let a = &rf / qt;
            let mut c = &r - &a * a.transpose() * qt;
            symmetrize(&mut c);
            sched.c.push(c);
            sched.r.push(r);
            sched.a.push(a);
            sched.q.push(qt);
        }
        Ok(sched)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}
