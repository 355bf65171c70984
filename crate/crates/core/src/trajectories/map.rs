//! Voxel-wise evidence maps for one subject.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evidence::{EvidenceCounter, EvidenceTarget};
use super::{Algorithm, EffectKind, SamplerPlan, VoxelSampler, DEFAULT_DRAWS, DEFAULT_THRESHOLD};
use crate::design::DesignMatrix;
use crate::dlm::{run_filter, ModelConfig, PosteriorSequence};
use crate::error::{Error, Result};
use crate::sampling::{domain, stream_rng};
use crate::volume::cluster::{cluster_from_offsets, coords, neighborhood_offsets};
use crate::volume::summary::{SummarySink, VoxelSummary};
use crate::volume::{extract_series, write_volume, Bold4D, NiftiHeader};

/// Voxels handed to the worker pool at a time.
const CHUNK: usize = 512;

/// Settings shared by subject and group maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapOptions {
    pub algorithm: Algorithm,
    pub kind: EffectKind,
    pub n_draws: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Squared neighborhood radius, 1..=4.
    pub radius: u32,
    /// Standardize each extracted series and center the design columns to
    /// match, which is equivalent to fitting a per-series intercept.
    pub standardize: bool,
    /// Task pairs `(a, b)` whose difference `a - b` is also mapped.
    pub contrasts: Vec<(usize, usize)>,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Fest,
            kind: EffectKind::Marginal,
            n_draws: DEFAULT_DRAWS,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            radius: 1,
            standardize: true,
            contrasts: Vec::new(),
            workers: 0,
        }
    }
}

impl MapOptions {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.n_draws == 0 {
            return Err(Error::Parameter("at least one draw is required".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Parameter(format!(
                "threshold {} is outside (0, 1]",
                self.threshold
            )));
        }
        neighborhood_offsets(self.radius)?;
        for &(a, b) in &self.contrasts {
            if a >= p || b >= p || a == b {
                return Err(Error::Parameter(format!(
                    "contrast ({a}, {b}) is invalid for {p} tasks"
                )));
            }
        }
        Ok(())
    }

    /// Tasks first, then contrasts.
    pub fn targets(&self, p: usize) -> Vec<EvidenceTarget> {
        (0..p)
            .map(EvidenceTarget::Task)
            .chain(
                self.contrasts
                    .iter()
                    .map(|&(a, b)| EvidenceTarget::Contrast(a, b)),
            )
            .collect()
    }

    pub(crate) fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
    }
}

/// One evidence map over the full grid (zero outside the mask).
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceVolume {
    pub name: String,
    pub target: EvidenceTarget,
    pub kind: EffectKind,
    pub algorithm: Algorithm,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl EvidenceVolume {
    /// Voxels whose evidence strictly exceeds `threshold`.
    pub fn active(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v > threshold).collect()
    }

    pub fn write_nifti(&self, path: impl AsRef<Path>, template: &NiftiHeader) -> Result<()> {
        write_volume(&self.values, &self.dims, template, path)
    }

    /// `voxel,i,j,k,evidence` rows for the voxels in `mask`.
    pub fn write_csv(&self, path: impl AsRef<Path>, mask: &[bool]) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let err = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["voxel", "i", "j", "k", "evidence"])
            .map_err(err)?;
        for (v, &m) in mask.iter().enumerate() {
            if m {
                let [i, j, k] = coords(self.dims, v);
                w.write_record(&[
                    v.to_string(),
                    i.to_string(),
                    j.to_string(),
                    k.to_string(),
                    format!("{}", self.values[v]),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A voxel whose fit or sampling failed; its evidence is written as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFailure {
    pub index: usize,
    pub coords: [usize; 3],
    pub message: String,
}

/// Evidence maps of one fit, one per task and contrast.
#[derive(Debug, Clone)]
pub struct SubjectMaps {
    pub maps: Vec<EvidenceVolume>,
    pub failures: Vec<VoxelFailure>,
    pub n_fitted: usize,
}

pub(crate) fn target_names(task_names: &[String], targets: &[EvidenceTarget]) -> Vec<String> {
    targets
        .iter()
        .map(|t| match *t {
            EvidenceTarget::Task(l) => task_names[l].clone(),
            EvidenceTarget::Contrast(a, b) => format!("{}-{}", task_names[a], task_names[b]),
        })
        .collect()
}

/// Regressors the filter actually sees: centered when series are
/// standardized, unchanged otherwise.
pub fn model_design(design: &DesignMatrix, standardize: bool) -> DesignMatrix {
    if standardize {
        design.centered()
    } else {
        design.clone()
    }
}

/// Filters one voxel's cluster and estimates evidence for every task and
/// contrast in `opts`. Also returns the filtered posteriors.
///
/// `design` is the raw design; `plan` must be built from
/// [`model_design`]`(design, opts.standardize)`.
pub fn voxel_evidence(
    vol: &Bold4D,
    v: usize,
    design: &DesignMatrix,
    cfg: &ModelConfig,
    plan: &SamplerPlan,
    opts: &MapOptions,
) -> Result<(Vec<f64>, PosteriorSequence)> {
    let offsets = neighborhood_offsets(opts.radius)?;
    let design = model_design(design, opts.standardize);
    if plan.design().is_some_and(|x| *x != design.values) {
        return Err(Error::Parameter(
            "sampler plan was built from a different design".into(),
        ));
    }
    voxel_evidence_with(vol, v, &design, cfg, plan, opts, &offsets)
}

fn voxel_evidence_with(
    vol: &Bold4D,
    v: usize,
    design: &DesignMatrix,
    cfg: &ModelConfig,
    plan: &SamplerPlan,
    opts: &MapOptions,
    offsets: &[[i64; 3]],
) -> Result<(Vec<f64>, PosteriorSequence)> {
    let cluster = cluster_from_offsets(coords(vol.dims, v), offsets, &vol.mask, vol.dims)?;
    let y = extract_series(vol, &cluster, opts.standardize);
    let seq = run_filter(&y, design, cfg)?;
    let mut sampler = VoxelSampler::new(opts.algorithm, plan, &seq, opts.kind)?;
    let mut counter = EvidenceCounter::new(seq.p(), opts.targets(seq.p()));
    let mut rng = stream_rng(opts.seed, domain::SAMPLER, v as u64);
    counter.run(&mut sampler, opts.n_draws, &mut rng)?;
    Ok((counter.probabilities(), seq))
}

/// Evidence maps for every in-mask voxel of `vol`.
///
/// Each voxel draws from its own random stream keyed by the seed and its
/// linear index, so results do not depend on the worker count. Voxels that
/// fail are reported in [`SubjectMaps::failures`] and left at 0. When
/// `summary` is given, the filtered posteriors of every fitted voxel are
/// streamed to it in ascending voxel order.
pub fn map_subject(
    vol: &Bold4D,
    design: &DesignMatrix,
    cfg: &ModelConfig,
    opts: &MapOptions,
    mut summary: Option<&mut dyn SummarySink>,
) -> Result<SubjectMaps> {
    let p = design.n_regressors();
    opts.validate(p)?;
    if design.n_scans() != vol.n_scans {
        return Err(Error::Metadata(format!(
            "volume has {} scans but the design has {}",
            vol.n_scans,
            design.n_scans()
        )));
    }
    let design = &model_design(design, opts.standardize);
    let plan = SamplerPlan::new(design, cfg)?;
    let offsets = neighborhood_offsets(opts.radius)?;
    let targets = opts.targets(p);
    let names = target_names(&design.task_names, &targets);
    let n_vox = vol.n_voxels();
    let mut values = vec![vec![0.0; n_vox]; targets.len()];
    let mut failures = Vec::new();
    let mut n_fitted = 0;
    let indices = vol.mask_indices();
    if indices.is_empty() {
        return Err(Error::Config("mask is empty".into()));
    }
    let pool = opts.pool()?;
    let want_summary = summary.is_some();
    for (c, chunk) in indices.chunks(CHUNK).enumerate() {
        let results: Vec<Result<(Vec<f64>, Option<VoxelSummary>)>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&v| {
                    let (probs, seq) =
                        voxel_evidence_with(vol, v, design, cfg, &plan, opts, &offsets)?;
                    Ok((
                        probs,
                        want_summary.then(|| VoxelSummary::from_sequence(v, &seq)),
                    ))
                })
                .collect()
        });
        for (&v, res) in chunk.iter().zip(results) {
            match res {
                Ok((probs, vs)) => {
                    for (map, pr) in values.iter_mut().zip(probs) {
                        map[v] = pr;
                    }
                    if let (Some(sink), Some(vs)) = (summary.as_deref_mut(), vs) {
                        sink.push(vs)?;
                    }
                    n_fitted += 1;
                }
                Err(e) => {
                    log::debug!("voxel {v} failed: {e}");
                    failures.push(VoxelFailure {
                        index: v,
                        coords: coords(vol.dims, v),
                        message: e.to_string(),
                    });
                }
            }
        }
        log::debug!(
            "chunk {c}: {} of {} voxels done",
            (c * CHUNK + chunk.len()).min(indices.len()),
            indices.len()
        );
    }
    if !failures.is_empty() {
        log::warn!(
            "{} of {} voxels failed and were set to 0",
            failures.len(),
            indices.len()
        );
    }
    let maps = values
        .into_iter()
        .zip(targets)
        .zip(names)
        .map(|((values, target), name)| EvidenceVolume {
            name,
            target,
            kind: opts.kind,
            algorithm: opts.algorithm,
            dims: vol.dims,
            values,
        })
        .collect();
    Ok(SubjectMaps {
        maps,
        failures,
        n_fitted,
    })
}
