//! Two-stage group analysis.
//!
//! Subject posteriors are summarized per voxel and averaged into a group
//! effect law: the mean is the subject average and every scale is
//! `(1/N²)` times the sum of the subject scales. Two groups are compared
//! through the law of their difference. Group trajectories are then drawn
//! with the same samplers and evidence rule as single subjects.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dlm::{ModelConfig, PosteriorState};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, psd_factor_scaled};
use crate::sampling::{domain, stream_rng};
use crate::trajectories::evidence::{EvidenceCounter, EvidenceTarget};
use crate::trajectories::map::{model_design, target_names};
use crate::trajectories::{
    Algorithm, EffectDistribution, EffectKind, EvidenceVolume, MapOptions, PathVisitor,
    ProjectedPosterior, SamplerPlan, VoxelFailure, VoxelSampler,
};
use crate::volume::cluster::coords;
use crate::volume::summary::{SubjectSummary, SummaryMeta, SummaryReader, VoxelSummary};

/// Voxels combined per parallel batch; each holds every subject's summary.
const GROUP_CHUNK: usize = 64;

/// Group effect law of one voxel at every time `t = 0..=T` (index 0 is the
/// averaged prior).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDistribution {
    pub kind: EffectKind,
    pub index: usize,
    pub n_subjects: usize,
    pub p: usize,
    pub d: usize,
    pub burn_in: usize,
    /// Averaged projected locations, `p x d`.
    pub mean: Vec<DMatrix<f64>>,
    /// `scale[t][l]`: `(1/N²) Σ C_t[l,l] P'S_tP`.
    pub scale: Vec<Vec<DMatrix<f64>>>,
    /// `innovation[t][l]`: `(1/N²) Σ W_t[l,l] P'S_tP`, zero at `t = 0`.
    pub innovation: Vec<Vec<DMatrix<f64>>>,
    /// Pooled observational scale `(1/N²) Σ P'S_tP`.
    pub noise: Vec<DMatrix<f64>>,
}

impl GroupDistribution {
    pub fn n_scans(&self) -> usize {
        self.mean.len() - 1
    }

    /// Law of the group effect of task `l` at time `t`.
    pub fn effect(&self, t: usize, l: usize) -> EffectDistribution {
        EffectDistribution {
            kind: self.kind,
            task: l,
            t,
            mean: self.mean[t].row(l).transpose(),
            scale: self.scale[t][l].clone(),
        }
    }
}

/// Location, left-scale diagonal and right scale of one subject at `t`.
fn subject_at<'a>(
    vs: &'a VoxelSummary,
    prior: &'a PosteriorState,
    t: usize,
) -> (&'a DMatrix<f64>, Vec<f64>, &'a DMatrix<f64>) {
    if t == 0 {
        (
            &prior.m,
            prior.c.diagonal().iter().copied().collect(),
            &prior.s,
        )
    } else {
        let ts = vs.at(t);
        (&ts.m, ts.c_diag.clone(), &ts.s)
    }
}

/// Combines the summaries of one voxel across subjects fitted with `cfg`.
pub fn combine_voxel(
    voxels: &[&VoxelSummary],
    cfg: &ModelConfig,
    kind: EffectKind,
) -> Result<GroupDistribution> {
    let first = *voxels
        .first()
        .ok_or_else(|| Error::Parameter("a group needs at least one subject".into()))?;
    let n_scans = first.times.len();
    let p = cfg.p();
    let d = kind.dim(first.q);
    for vs in voxels {
        if vs.index != first.index {
            return Err(Error::Metadata(format!(
                "voxel {} combined with voxel {}",
                vs.index, first.index
            )));
        }
        if vs.times.len() != n_scans {
            return Err(Error::Metadata(format!(
                "{} vs {} time points",
                vs.times.len(),
                n_scans
            )));
        }
        if kind.dim(vs.q) != d {
            return Err(Error::Metadata(format!(
                "joint effects need equal cluster sizes, found {} and {} at voxel {}",
                vs.q, first.q, first.index
            )));
        }
        if vs.times.first().is_some_and(|ts| ts.m.nrows() != p) {
            return Err(Error::Metadata(format!(
                "summary has {} tasks, expected {p}",
                vs.times[0].m.nrows()
            )));
        }
    }
    let priors = voxels
        .iter()
        .map(|vs| cfg.initial_state(vs.q))
        .collect::<Result<Vec<_>>>()?;
    let n = voxels.len() as f64;
    let mut mean = Vec::with_capacity(n_scans + 1);
    let mut scale = Vec::with_capacity(n_scans + 1);
    let mut innovation = Vec::with_capacity(n_scans + 1);
    let mut noise = Vec::with_capacity(n_scans + 1);
    for t in 0..=n_scans {
        let mut m_sum = DMatrix::zeros(p, d);
        let mut s_sum = DMatrix::zeros(d, d);
        let mut c_sum = vec![DMatrix::zeros(d, d); p];
        let mut w_sum = vec![DMatrix::zeros(d, d); p];
        for (vs, prior) in voxels.iter().zip(&priors) {
            let (m, c_diag, s) = subject_at(vs, prior, t);
            let ps = kind.project_scale(s);
            m_sum += kind.project_location(m);
            for l in 0..p {
                c_sum[l] += &ps * c_diag[l];
            }
            if t > 0 {
                let (_, c_prev, _) = subject_at(vs, prior, t - 1);
                for l in 0..p {
                    w_sum[l] += &ps * (c_prev[l] * (1.0 / cfg.beta[l] - 1.0));
                }
            }
            s_sum += ps;
        }
        let nn = n * n;
        mean.push(m_sum / n);
        scale.push(c_sum.into_iter().map(|m| m / nn).collect());
        innovation.push(w_sum.into_iter().map(|m| m / nn).collect());
        noise.push(s_sum / nn);
    }
    Ok(GroupDistribution {
        kind,
        index: first.index,
        n_subjects: voxels.len(),
        p,
        d,
        burn_in: cfg.burn_in,
        mean,
        scale,
        innovation,
        noise,
    })
}

/// Law of `a - b`: means subtract and every scale adds.
pub fn group_contrast(a: &GroupDistribution, b: &GroupDistribution) -> Result<GroupDistribution> {
    let mut issues = Vec::new();
    if a.kind != b.kind {
        issues.push(format!("effect kinds {} and {}", a.kind, b.kind));
    }
    if (a.p, a.d) != (b.p, b.d) {
        issues.push(format!("shapes {}x{} and {}x{}", a.p, a.d, b.p, b.d));
    }
    if a.n_scans() != b.n_scans() || a.burn_in != b.burn_in {
        issues.push(format!(
            "windows {}..={} and {}..={}",
            a.burn_in,
            a.n_scans(),
            b.burn_in,
            b.n_scans()
        ));
    }
    if a.index != b.index {
        issues.push(format!("voxels {} and {}", a.index, b.index));
    }
    if !issues.is_empty() {
        return Err(Error::Metadata(format!(
            "cannot contrast groups: {}",
            issues.join("; ")
        )));
    }
    let sum = |x: &[DMatrix<f64>], y: &[DMatrix<f64>]| {
        x.iter().zip(y).map(|(u, v)| u + v).collect::<Vec<_>>()
    };
    Ok(GroupDistribution {
        kind: a.kind,
        index: a.index,
        n_subjects: a.n_subjects + b.n_subjects,
        p: a.p,
        d: a.d,
        burn_in: a.burn_in,
        mean: a.mean.iter().zip(&b.mean).map(|(u, v)| u - v).collect(),
        scale: a
            .scale
            .iter()
            .zip(&b.scale)
            .map(|(u, v)| sum(u, v))
            .collect(),
        innovation: a
            .innovation
            .iter()
            .zip(&b.innovation)
            .map(|(u, v)| sum(u, v))
            .collect(),
        noise: sum(&a.noise, &b.noise),
    })
}

/// Checks that subject summaries can be pooled. Returns whether every
/// subject shares one design.
pub fn check_compatible(metas: &[&SummaryMeta]) -> Result<bool> {
    let first = *metas
        .first()
        .ok_or_else(|| Error::Parameter("a group needs at least one subject".into()))?;
    let mut issues = Vec::new();
    for (i, m) in metas.iter().enumerate().skip(1) {
        let mut field = |name: &str, differs: bool, a: String, b: String| {
            if differs {
                issues.push(format!("subject {}: {name} {b} differs from {a}", i + 1));
            }
        };
        field(
            "extent",
            m.dims != first.dims,
            format!("{:?}", first.dims),
            format!("{:?}", m.dims),
        );
        field(
            "scan count",
            m.n_scans != first.n_scans,
            first.n_scans.to_string(),
            m.n_scans.to_string(),
        );
        field(
            "tasks",
            m.task_names != first.task_names,
            format!("{:?}", first.task_names),
            format!("{:?}", m.task_names),
        );
        field(
            "radius",
            m.radius != first.radius,
            first.radius.to_string(),
            m.radius.to_string(),
        );
        field(
            "burn-in",
            m.config.burn_in != first.config.burn_in,
            first.config.burn_in.to_string(),
            m.config.burn_in.to_string(),
        );
        field(
            "model configuration",
            m.config != first.config,
            "the first subject's".into(),
            "of this subject".into(),
        );
        field(
            "standardization",
            m.standardize != first.standardize,
            first.standardize.to_string(),
            m.standardize.to_string(),
        );
    }
    if !issues.is_empty() {
        return Err(Error::Metadata(format!(
            "incompatible summaries: {}",
            issues.join("; ")
        )));
    }
    Ok(metas.iter().all(|m| m.design_hash == first.design_hash))
}

/// Group laws of every voxel present in all summaries.
pub fn group_combine(
    summaries: &[SubjectSummary],
    kind: EffectKind,
) -> Result<Vec<GroupDistribution>> {
    let metas: Vec<&SummaryMeta> = summaries.iter().map(|s| &s.meta).collect();
    check_compatible(&metas)?;
    let cfg = &summaries[0].meta.config;
    let mut cursors: Vec<SummaryCursor<'_>> = summaries.iter().map(SummaryCursor::new).collect();
    let mut lock = Lockstep::new(
        cursors
            .iter_mut()
            .map(|c| c as &mut dyn SummarySource)
            .collect(),
    )?;
    let mut out = Vec::new();
    while let Some(voxels) = lock.next()? {
        let refs: Vec<&VoxelSummary> = voxels.iter().collect();
        out.push(combine_voxel(&refs, cfg, kind)?);
    }
    Ok(out)
}

/// Projects a stored voxel summary for the samplers.
pub fn project_summary(
    vs: &VoxelSummary,
    cfg: &ModelConfig,
    kind: EffectKind,
) -> Result<ProjectedPosterior> {
    let prior = cfg.initial_state(vs.q)?;
    let mut m = vec![kind.project_location(&prior.m)];
    let mut s = vec![kind.project_scale(&prior.s)];
    let mut n = vec![prior.n];
    for ts in &vs.times {
        m.push(kind.project_location(&ts.m));
        s.push(kind.project_scale(&ts.s));
        n.push(ts.n);
    }
    let s_factor = s.iter().map(cholesky_lower).collect::<Result<Vec<_>>>()?;
    Ok(ProjectedPosterior {
        kind,
        p: cfg.p(),
        d: kind.dim(vs.q),
        prior_m: m[0].clone(),
        m,
        s,
        s_factor,
        n,
    })
}

/// Draws group trajectories for one voxel.
///
/// The forward estimated and forward state samplers draw each task from the
/// combined law. The backward sampler draws a path for every subject with
/// the shared plan and averages them, subtracting the second group's
/// average when one is given.
pub struct GroupSampler<'a> {
    pub algorithm: Algorithm,
    p: usize,
    d: usize,
    burn_in: usize,
    source: Source<'a>,
    theta: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    buf: Vec<f64>,
}

enum Source<'a> {
    Law {
        dist: GroupDistribution,
        plan: Option<&'a SamplerPlan>,
        scale_factor: Vec<Vec<DMatrix<f64>>>,
        innovation_factor: Vec<Vec<DMatrix<f64>>>,
        noise_factor: Vec<DMatrix<f64>>,
    },
    Subjects {
        a: Vec<VoxelSampler<'a>>,
        b: Vec<VoxelSampler<'a>>,
        paths: Vec<f64>,
    },
}

impl<'a> GroupSampler<'a> {
    /// Forward estimated (needs `plan` with the shared design) or forward
    /// state sampling from a combined law.
    pub fn from_distribution(
        algorithm: Algorithm,
        dist: GroupDistribution,
        plan: Option<&'a SamplerPlan>,
    ) -> Result<Self> {
        match algorithm {
            Algorithm::Ffbs => {
                return Err(Error::Unsupported(
                    "group backward sampling needs the subject posteriors; use GroupSampler::from_subjects".into(),
                ))
            }
            Algorithm::Fest => {
                let plan = plan.ok_or_else(|| {
                    Error::Unsupported("group FEST needs one design shared by every subject; use FSTS".into())
                })?;
                if plan.design().is_none() || plan.n_scans != dist.n_scans() || plan.p != dist.p {
                    return Err(Error::Parameter("plan does not match the group posteriors".into()));
                }
            }
            Algorithm::Fsts => {}
        }
        if dist.burn_in == 0 || dist.burn_in > dist.n_scans() {
            return Err(Error::Parameter(format!(
                "burn-in {} is outside 1..={}",
                dist.burn_in,
                dist.n_scans()
            )));
        }
        let factor_all = |mats: &[Vec<DMatrix<f64>>]| -> Result<Vec<Vec<DMatrix<f64>>>> {
            mats.iter()
                .map(|per| {
                    per.iter()
                        .map(|m| psd_factor_scaled(m, m.abs().max()))
                        .collect::<Result<Vec<_>>>()
                })
                .collect()
        };
        let scale_factor = factor_all(&dist.scale)?;
        let innovation_factor = factor_all(&dist.innovation)?;
        let noise_factor = dist
            .noise
            .iter()
            .map(cholesky_lower)
            .collect::<Result<Vec<_>>>()?;
        let (p, d) = (dist.p, dist.d);
        Ok(Self {
            algorithm,
            p,
            d,
            burn_in: dist.burn_in,
            source: Source::Law {
                dist,
                plan,
                scale_factor,
                innovation_factor,
                noise_factor,
            },
            theta: vec![0.0; p * d],
            z: vec![0.0; d],
            y: vec![0.0; d],
            buf: vec![0.0; d],
        })
    }

    /// Averaged subject paths from the backward sampler. `b` may be empty.
    pub fn from_subjects(
        plan: &'a SamplerPlan,
        a: Vec<ProjectedPosterior>,
        b: Vec<ProjectedPosterior>,
    ) -> Result<Self> {
        let first = a
            .first()
            .ok_or_else(|| Error::Parameter("a group needs at least one subject".into()))?;
        let (p, d) = (first.p, first.d);
        if a.iter()
            .chain(&b)
            .any(|s| (s.p, s.d) != (p, d) || s.n_scans() != plan.n_scans)
        {
            return Err(Error::Metadata(
                "subject posteriors have different shapes".into(),
            ));
        }
        let build = |v: Vec<ProjectedPosterior>| -> Result<Vec<VoxelSampler<'a>>> {
            v.into_iter()
                .map(|post| VoxelSampler::from_projected(Algorithm::Ffbs, plan, post))
                .collect()
        };
        Ok(Self {
            algorithm: Algorithm::Ffbs,
            p,
            d,
            burn_in: plan.burn_in,
            source: Source::Subjects {
                a: build(a)?,
                b: build(b)?,
                paths: vec![0.0; plan.n_retained() * p * d],
            },
            theta: vec![0.0; p * d],
            z: vec![0.0; d],
            y: vec![0.0; d],
            buf: vec![0.0; d],
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Runs one draw, feeding `(t, θ_t)` (column-major `p x d`) at the
    /// retained times in ascending order.
    pub fn draw_into<R: Rng + ?Sized, V: PathVisitor + ?Sized>(
        &mut self,
        rng: &mut R,
        visitor: &mut V,
    ) -> Result<()> {
        let (p, d, burn_in) = (self.p, self.d, self.burn_in);
        let theta = &mut self.theta;
        let z = &mut self.z;
        let y = &mut self.y;
        let v = &mut self.buf;
        match &mut self.source {
            Source::Law {
                dist,
                plan,
                scale_factor,
                innovation_factor,
                noise_factor,
            } => match self.algorithm {
                Algorithm::Fsts => {
                    for t in burn_in..=dist.n_scans() {
                        for l in 0..p {
                            v.iter_mut().for_each(|x| *x = 0.0);
                            add_factor(v, &scale_factor[t - 1][l], z, rng);
                            add_factor(v, &innovation_factor[t][l], z, rng);
                            for j in 0..d {
                                theta[l + p * j] = dist.mean[t - 1][(l, j)] + v[j];
                            }
                        }
                        if !visitor.visit(t, theta) {
                            break;
                        }
                    }
                }
                _ => {
                    let plan = plan.expect("checked at construction");
                    let x = plan.design().expect("checked at construction");
                    let noise_sd = plan.v_scale.sqrt();
                    theta.copy_from_slice(dist.mean[0].as_slice());
                    for t in 1..=dist.n_scans() {
                        y.iter_mut().for_each(|e| *e = 0.0);
                        add_factor(y, &noise_factor[t], z, rng);
                        y.iter_mut().for_each(|e| *e *= noise_sd);
                        for l in 0..p {
                            v.iter_mut().for_each(|x| *x = 0.0);
                            add_factor(v, &scale_factor[t][l], z, rng);
                            for j in 0..d {
                                y[j] += x[(t - 1, l)] * (dist.mean[t][(l, j)] + v[j]);
                            }
                        }
                        let a = plan.gain(t);
                        for j in 0..d {
                            let fitted: f64 =
                                (0..p).map(|l| x[(t - 1, l)] * theta[l + p * j]).sum();
                            let r = y[j] - fitted;
                            for l in 0..p {
                                theta[l + p * j] += a[l] * r;
                            }
                        }
                        if t >= burn_in && !visitor.visit(t, theta) {
                            break;
                        }
                    }
                }
            },
            Source::Subjects { a, b, paths } => {
                paths.iter_mut().for_each(|v| *v = 0.0);
                let block = p * d;
                for (samplers, sign) in [(a, 1.0), (b, -1.0)] {
                    if samplers.is_empty() {
                        continue;
                    }
                    let w = sign / samplers.len() as f64;
                    for s in samplers.iter_mut() {
                        s.draw_into(rng, &mut |t: usize, th: &[f64]| {
                            let off = (t - burn_in) * block;
                            for (acc, v) in paths[off..off + block].iter_mut().zip(th) {
                                *acc += w * v;
                            }
                            true
                        })?;
                    }
                }
                for (i, chunk) in paths.chunks(block).enumerate() {
                    if !visitor.visit(burn_in + i, chunk) {
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    /// One full draw as `p x d` matrices at the retained times.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<DMatrix<f64>>> {
        let (p, d, burn_in) = (self.p, self.d, self.burn_in);
        let mut out = Vec::new();
        self.draw_into(rng, &mut |t: usize, th: &[f64]| {
            debug_assert_eq!(t, burn_in + out.len());
            out.push(DMatrix::from_column_slice(p, d, th));
            true
        })?;
        Ok(out)
    }
}

/// `v += L z` with fresh standard normal `z`.
fn add_factor<R: Rng + ?Sized>(v: &mut [f64], lower: &DMatrix<f64>, z: &mut [f64], rng: &mut R) {
    for zi in z.iter_mut() {
        *zi = StandardNormal.sample(rng);
    }
    let d = v.len();
    for i in 0..d {
        v[i] += (0..d).map(|k| lower[(i, k)] * z[k]).sum::<f64>();
    }
}

/// A stream of voxel summaries in ascending voxel order.
pub trait SummarySource {
    fn meta(&self) -> &SummaryMeta;
    fn next_voxel(&mut self) -> Result<Option<VoxelSummary>>;
}

impl SummarySource for SummaryReader {
    fn meta(&self) -> &SummaryMeta {
        &self.meta
    }

    fn next_voxel(&mut self) -> Result<Option<VoxelSummary>> {
        SummaryReader::next_voxel(self)
    }
}

/// Reads an in-memory summary as a stream.
pub struct SummaryCursor<'a> {
    summary: &'a SubjectSummary,
    pos: usize,
}

impl<'a> SummaryCursor<'a> {
    pub fn new(summary: &'a SubjectSummary) -> Self {
        Self { summary, pos: 0 }
    }
}

impl SummarySource for SummaryCursor<'_> {
    fn meta(&self) -> &SummaryMeta {
        &self.summary.meta
    }

    fn next_voxel(&mut self) -> Result<Option<VoxelSummary>> {
        let v = self.summary.voxels.get(self.pos).cloned();
        self.pos += 1;
        Ok(v)
    }
}

/// Walks several sources together, yielding the voxels present in all.
struct Lockstep<'s> {
    sources: Vec<&'s mut dyn SummarySource>,
    heads: Vec<Option<VoxelSummary>>,
    skipped: usize,
}

impl<'s> Lockstep<'s> {
    fn new(mut sources: Vec<&'s mut dyn SummarySource>) -> Result<Self> {
        let heads = sources
            .iter_mut()
            .map(|s| s.next_voxel())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sources,
            heads,
            skipped: 0,
        })
    }

    fn next(&mut self) -> Result<Option<Vec<VoxelSummary>>> {
        loop {
            let mut target = 0;
            for h in &self.heads {
                match h {
                    Some(v) => target = target.max(v.index),
                    None => return Ok(None),
                }
            }
            let mut aligned = true;
            for (src, head) in self.sources.iter_mut().zip(self.heads.iter_mut()) {
                while head.as_ref().is_some_and(|v| v.index < target) {
                    *head = src.next_voxel()?;
                    self.skipped += 1;
                }
                match head {
                    Some(v) if v.index == target => {}
                    Some(_) => aligned = false,
                    None => return Ok(None),
                }
            }
            if aligned {
                let mut out = Vec::with_capacity(self.heads.len());
                for (src, head) in self.sources.iter_mut().zip(self.heads.iter_mut()) {
                    let next = src.next_voxel()?;
                    out.push(std::mem::replace(head, next).expect("aligned head"));
                }
                return Ok(Some(out));
            }
        }
    }
}

/// Group evidence maps.
#[derive(Debug, Clone)]
pub struct GroupMaps {
    pub maps: Vec<EvidenceVolume>,
    pub failures: Vec<VoxelFailure>,
    pub n_fitted: usize,
    pub n_subjects: (usize, usize),
    pub shared_design: bool,
}

fn group_voxel_evidence(
    voxels: &[VoxelSummary],
    n_a: usize,
    cfg: &ModelConfig,
    plan: Option<&SamplerPlan>,
    opts: &MapOptions,
    targets: &[EvidenceTarget],
) -> Result<Vec<f64>> {
    let (a, b) = voxels.split_at(n_a);
    let index = a[0].index;
    let mut sampler = match opts.algorithm {
        Algorithm::Ffbs => {
            let plan = plan.ok_or_else(|| {
                Error::Unsupported(
                    "group FFBS needs one design shared by every subject; use FSTS".into(),
                )
            })?;
            let project = |s: &[VoxelSummary]| -> Result<Vec<ProjectedPosterior>> {
                s.iter()
                    .map(|vs| project_summary(vs, cfg, opts.kind))
                    .collect()
            };
            GroupSampler::from_subjects(plan, project(a)?, project(b)?)?
        }
        alg => {
            let combine =
                |s: &[VoxelSummary]| combine_voxel(&s.iter().collect::<Vec<_>>(), cfg, opts.kind);
            let mut dist = combine(a)?;
            if !b.is_empty() {
                dist = group_contrast(&dist, &combine(b)?)?;
            }
            GroupSampler::from_distribution(alg, dist, plan)?
        }
    };
    let mut counter = EvidenceCounter::new(sampler.p(), targets.to_vec());
    let mut rng = stream_rng(opts.seed, domain::GROUP, index as u64);
    for _ in 0..opts.n_draws {
        sampler.draw_into(&mut rng, &mut counter)?;
        counter.finish_draw();
    }
    Ok(counter.probabilities())
}

/// Evidence maps for one group, or for the difference of two groups when
/// `group_b` is non-empty, over the voxels present in every summary.
///
/// Sources are read voxel by voxel in lockstep so memory holds only a batch
/// of voxels at a time. The forward estimated and backward samplers need
/// every subject to share one design.
pub fn map_group<S: SummarySource>(
    group_a: &mut [S],
    group_b: &mut [S],
    opts: &MapOptions,
) -> Result<GroupMaps> {
    if group_a.is_empty() {
        return Err(Error::Parameter(
            "a group needs at least one subject".into(),
        ));
    }
    let metas: Vec<&SummaryMeta> = group_a
        .iter()
        .chain(group_b.iter())
        .map(|s| s.meta())
        .collect();
    let shared_design = check_compatible(&metas)?;
    let meta = group_a[0].meta().clone();
    let p = meta.p();
    opts.validate(p)?;
    if opts.algorithm != Algorithm::Fsts && !shared_design {
        return Err(Error::Unsupported(format!(
            "{} needs one design shared by every subject, but the designs differ; use FSTS",
            opts.algorithm
        )));
    }
    let cfg = meta.config.clone();
    let plan = if shared_design {
        Some(SamplerPlan::new(
            &model_design(&meta.design_matrix()?, meta.standardize),
            &cfg,
        )?)
    } else {
        None
    };
    let targets = opts.targets(p);
    let names = target_names(&meta.task_names, &targets);
    let n_vox: usize = meta.dims.iter().product();
    let mut values = vec![vec![0.0; n_vox]; targets.len()];
    let mut failures = Vec::new();
    let mut n_fitted = 0;
    let n_a = group_a.len();
    let n_b = group_b.len();
    let sources: Vec<&mut dyn SummarySource> = group_a
        .iter_mut()
        .chain(group_b.iter_mut())
        .map(|s| s as &mut dyn SummarySource)
        .collect();
    let mut lock = Lockstep::new(sources)?;
    let pool = opts.pool()?;
    loop {
        let mut batch = Vec::with_capacity(GROUP_CHUNK);
        while batch.len() < GROUP_CHUNK {
            match lock.next()? {
                Some(v) => batch.push(v),
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        let results: Vec<Result<Vec<f64>>> = pool.install(|| {
            batch
                .par_iter()
                .map(|voxels| {
                    group_voxel_evidence(voxels, n_a, &cfg, plan.as_ref(), opts, &targets)
                })
                .collect()
        });
        for (voxels, res) in batch.iter().zip(results) {
            let v = voxels[0].index;
            match res {
                Ok(probs) => {
                    for (map, pr) in values.iter_mut().zip(probs) {
                        map[v] = pr;
                    }
                    n_fitted += 1;
                }
                Err(e) => {
                    log::debug!("voxel {v} failed: {e}");
                    failures.push(VoxelFailure {
                        index: v,
                        coords: coords(meta.dims, v),
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    if lock.skipped > 0 {
        log::info!(
            "{} subject voxels lie outside the common mask and were skipped",
            lock.skipped
        );
    }
    if n_fitted + failures.len() == 0 {
        return Err(Error::Metadata(
            "the subject masks have no voxel in common".into(),
        ));
    }
    if !failures.is_empty() {
        log::warn!("{} group voxels failed and were set to 0", failures.len());
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
            dims: meta.dims,
            values,
        })
        .collect();
    Ok(GroupMaps {
        maps,
        failures,
        n_fitted,
        n_subjects: (n_a, n_b),
        shared_design,
    })
}
