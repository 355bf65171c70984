//! Synthetic data: spherical-activation phantoms, pure-noise nulls, the
//! fictitious paradigms used for false-positive assessment, and the
//! assessment itself.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{DesignMatrix, HrfParams, StimulusSpec, DEFAULT_UPSAMPLE};
use crate::dlm::ModelConfig;
use crate::error::{Error, Result};
use crate::sampling::{domain, stream_rng};
use crate::trajectories::{map_subject, MapOptions};
use crate::volume::{coords, Bold4D};

pub const DEFAULT_BASELINE: f64 = 100.0;

/// Temporal noise of every voxel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    White,
    /// Stationary first-order autoregression with coefficient `phi`.
    Ar1 { phi: f64 },
}

impl NoiseModel {
    fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Ar1 { phi } if !(phi.abs() < 1.0) => Err(Error::Parameter(format!(
                "autoregressive coefficient {phi} must lie in (-1, 1)"
            ))),
            _ => Ok(()),
        }
    }

    /// `n` values with marginal standard deviation `sd`.
    pub fn series<R: Rng + ?Sized>(&self, n: usize, sd: f64, rng: &mut R) -> Vec<f64> {
        let mut z = || -> f64 { StandardNormal.sample(rng) };
        match *self {
            NoiseModel::White => (0..n).map(|_| sd * z()).collect(),
            NoiseModel::Ar1 { phi } => {
                let innov = sd * (1.0 - phi * phi).sqrt();
                let mut out = Vec::with_capacity(n);
                let mut e = sd * z();
                for _ in 0..n {
                    out.push(e);
                    e = phi * e + innov * z();
                }
                out
            }
        }
    }
}

/// A sphere of activation driven by one design column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: [usize; 3],
    /// Radius in voxels; voxels at index distance `≤ radius` are inside.
    pub radius: f64,
    pub effect: f64,
    #[serde(default)]
    pub task: usize,
}

impl Region {
    pub fn contains(&self, ijk: [usize; 3]) -> bool {
        let d2: f64 = (0..3)
            .map(|a| (ijk[a] as f64 - self.center[a] as f64).powi(2))
            .sum();
        d2 <= self.radius * self.radius
    }
}

/// Phantom configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default)]
    pub regions: Vec<Region>,
    /// Peak signal amplitude over noise standard deviation.
    pub snr: f64,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_baseline")]
    pub baseline: f64,
    #[serde(default = "default_voxel_size")]
    pub voxel_size: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_baseline() -> f64 {
    DEFAULT_BASELINE
}

fn default_voxel_size() -> [f64; 3] {
    [3.0; 3]
}

impl PhantomSpec {
    pub fn validate(&self, design: &DesignMatrix) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!(
                "phantom extent {:?} is empty",
                self.dims
            )));
        }
        if !(self.snr > 0.0) || !self.snr.is_finite() {
            return Err(Error::Parameter(format!(
                "signal-to-noise ratio {} must be positive",
                self.snr
            )));
        }
        self.noise.validate()?;
        for (i, r) in self.regions.iter().enumerate() {
            if !(r.radius > 0.0) {
                return Err(Error::Parameter(format!(
                    "region {i}: radius {} must be positive",
                    r.radius
                )));
            }
            if (0..3).any(|a| r.center[a] >= self.dims[a]) {
                return Err(Error::Parameter(format!(
                    "region {i}: center {:?} lies outside {:?}",
                    r.center, self.dims
                )));
            }
            if r.task >= design.n_regressors() {
                return Err(Error::Parameter(format!(
                    "region {i}: task {} but the design has {} regressors",
                    r.task,
                    design.n_regressors()
                )));
            }
        }
        Ok(())
    }

    /// Noise standard deviation giving the requested ratio for the strongest
    /// region; a unit reference amplitude is used when there are no regions.
    pub fn noise_sd(&self, design: &DesignMatrix) -> f64 {
        let peak = self
            .regions
            .iter()
            .map(|r| {
                let col = design.values.column(r.task);
                r.effect.abs() * col.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            })
            .fold(0.0f64, f64::max);
        let reference = if peak > 0.0 { peak } else { 1.0 };
        reference / self.snr
    }
}

/// A phantom volume and its true activation mask.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Bold4D,
    pub truth: Vec<bool>,
}

/// Baseline plus `effect · regressor` inside each sphere plus noise.
pub fn generate_phantom(spec: &PhantomSpec, design: &DesignMatrix) -> Result<Phantom> {
    spec.validate(design)?;
    let t_len = design.n_scans();
    let n_vox: usize = spec.dims.iter().product();
    let sd = spec.noise_sd(design);
    let mut data = Vec::with_capacity(n_vox * t_len);
    let mut truth = vec![false; n_vox];
    for (v, is_active) in truth.iter_mut().enumerate() {
        let ijk = coords(spec.dims, v);
        let mut rng = stream_rng(spec.seed, domain::PHANTOM, v as u64);
        let noise = spec.noise.series(t_len, sd, &mut rng);
        let inside: Vec<&Region> = spec.regions.iter().filter(|r| r.contains(ijk)).collect();
        *is_active = inside.iter().any(|r| r.effect != 0.0);
        for (t, e) in noise.into_iter().enumerate() {
            let signal: f64 = inside
                .iter()
                .map(|r| r.effect * design.values[(t, r.task)])
                .sum();
            data.push(spec.baseline + signal + e);
        }
    }
    let volume = Bold4D::new(spec.dims, t_len, spec.voxel_size, design.tr, data)?;
    Ok(Phantom { volume, truth })
}

/// Stationary noise around a constant baseline, with no stimulus-locked
/// component.
pub fn generate_resting(
    dims: [usize; 3],
    n_scans: usize,
    tr: f64,
    noise: NoiseModel,
    seed: u64,
) -> Result<Bold4D> {
    noise.validate()?;
    let n_vox: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n_vox * n_scans);
    for v in 0..n_vox {
        let mut rng = stream_rng(seed, domain::RESTING, v as u64);
        data.extend(
            noise
                .series(n_scans, 1.0, &mut rng)
                .into_iter()
                .map(|e| DEFAULT_BASELINE + e),
        );
    }
    Bold4D::new(dims, n_scans, [3.0; 3], tr, data)
}

/// The fictitious paradigms used for false-positive assessment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Paradigm {
    /// 10 s on, 10 s off.
    B1,
    /// 30 s on, 30 s off.
    B2,
    /// 2 s events, 6 s rest.
    E1,
    /// 1-4 s events, 3-6 s rest, uniformly at random.
    E2,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::B1, Paradigm::B2, Paradigm::E1, Paradigm::E2];

    /// Longest possible on + off cycle in seconds.
    fn max_cycle(self) -> f64 {
        match self {
            Paradigm::B1 => 20.0,
            Paradigm::B2 => 60.0,
            Paradigm::E1 => 8.0,
            Paradigm::E2 => 10.0,
        }
    }

    /// Stimulus train over `n_scans · tr` seconds, starting with rest.
    pub fn stimulus(self, n_scans: usize, tr: f64, seed: u64) -> Result<StimulusSpec> {
        let window = n_scans as f64 * tr;
        if window < 2.0 * self.max_cycle() {
            return Err(Error::Parameter(format!(
                "{self}: a {window} s window holds fewer than two {} s cycles",
                self.max_cycle()
            )));
        }
        let mut rng = stream_rng(seed, domain::PARADIGM, self as u64);
        let mut next = |fixed: f64, range: Option<(f64, f64)>| match range {
            Some((lo, hi)) => rng.random_range(lo..=hi),
            None => fixed,
        };
        let (on, off) = match self {
            Paradigm::B1 => ((10.0, None), (10.0, None)),
            Paradigm::B2 => ((30.0, None), (30.0, None)),
            Paradigm::E1 => ((2.0, None), (6.0, None)),
            Paradigm::E2 => ((0.0, Some((1.0, 4.0))), (0.0, Some((3.0, 6.0)))),
        };
        let (mut onsets, mut durations) = (Vec::new(), Vec::new());
        let mut t = 0.0;
        loop {
            t += next(off.0, off.1);
            if t >= window {
                break;
            }
            let d = next(on.0, on.1);
            onsets.push(t);
            durations.push(d);
            t += d;
        }
        StimulusSpec::new(self.to_string(), onsets, durations)
    }

    pub fn design(self, n_scans: usize, tr: f64, seed: u64) -> Result<DesignMatrix> {
        let stim = self.stimulus(n_scans, tr, seed)?;
        DesignMatrix::from_stimuli(
            &[stim],
            n_scans,
            tr,
            &HrfParams::default(),
            DEFAULT_UPSAMPLE,
        )
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::B1 => "B1",
            Paradigm::B2 => "B2",
            Paradigm::E1 => "E1",
            Paradigm::E2 => "E2",
        })
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B1" => Ok(Paradigm::B1),
            "B2" => Ok(Paradigm::B2),
            "E1" => Ok(Paradigm::E1),
            "E2" => Ok(Paradigm::E2),
            other => Err(Error::Parameter(format!(
                "unknown paradigm '{other}' (expected B1, B2, E1 or E2)"
            ))),
        }
    }
}

/// Designs for B1, B2, E1 and E2, in that order.
pub fn fictitious_designs(n_scans: usize, tr: f64, seed: u64) -> Result<Vec<DesignMatrix>> {
    Paradigm::ALL
        .iter()
        .map(|p| p.design(n_scans, tr, seed))
        .collect()
}

/// Outcome of a false-positive assessment.
#[derive(Debug, Clone, PartialEq)]
pub struct FprReport {
    pub rate: f64,
    pub n_active: usize,
    pub n_voxels: usize,
    /// `(voxel, evidence)` for every in-mask voxel.
    pub evidence: Vec<(usize, f64)>,
    pub n_failed: usize,
}

impl FprReport {
    pub fn write_csv(
        &self,
        path: impl AsRef<Path>,
        dims: [usize; 3],
        threshold: f64,
    ) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["voxel", "i", "j", "k", "evidence", "active"])
            .map_err(err)?;
        for &(v, e) in &self.evidence {
            let [i, j, k] = coords(dims, v);
            w.write_record(&[
                v.to_string(),
                i.to_string(),
                j.to_string(),
                k.to_string(),
                format!("{e}"),
                u8::from(e > threshold).to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Maps the first task of `design` over null data and counts voxels whose
/// evidence strictly exceeds the threshold.
pub fn assess_fpr(
    data: &Bold4D,
    design: &DesignMatrix,
    cfg: &ModelConfig,
    opts: &MapOptions,
) -> Result<FprReport> {
    let n_voxels = data.n_in_mask();
    if n_voxels == 0 {
        return Err(Error::Config("mask is empty".into()));
    }
    let maps = map_subject(data, design, cfg, opts, None)?;
    let map = &maps.maps[0];
    let evidence: Vec<(usize, f64)> = data
        .mask_indices()
        .into_iter()
        .map(|v| (v, map.values[v]))
        .collect();
    let n_active = evidence
        .iter()
        .filter(|&&(_, e)| e > opts.threshold)
        .count();
    Ok(FprReport {
        rate: n_active as f64 / n_voxels as f64,
        n_active,
        n_voxels,
        evidence,
        n_failed: maps.failures.len(),
    })
}

/// Overlap `2|A ∩ B| / (|A| + |B|)` of two masks.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
