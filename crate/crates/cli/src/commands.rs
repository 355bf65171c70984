use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use mvdlm::{
    assess_fpr, build_mask, generate_phantom, generate_resting, load_design, map_group,
    map_subject, read_mask, read_volume, Bold4D, DesignMatrix, Error, EvidenceVolume, HrfParams,
    MaskStrategy, NiftiHeader, NoiseModel, Paradigm, PhantomSpec, StimulusSpec, SummaryMeta,
    SummaryReader, SummarySource, SummaryWriter, VoxelFailure,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{read_json, RunConfig};
use crate::manifest::{create_dir, file_stem, json_hash, Manifest, MANIFEST};
use crate::{AssessArgs, DesignArgs, FitArgs, GroupArgs, HrfArgs, SimulateArgs};

const SUMMARY_DIR: &str = "summary";
const FAILURES: &str = "failures.tsv";

fn echo(cfg: &impl Serialize) -> Result<()> {
    info!("resolved config: {}", serde_json::to_string(cfg)?);
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_maps(
    maps: &[EvidenceVolume],
    prefix: &str,
    header: &NiftiHeader,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<()> {
    for map in maps {
        let path = out.join(format!("{prefix}_{}.nii.gz", file_stem(&map.name)));
        map.write_nifti(&path, header)?;
        manifest.output(&path);
    }
    Ok(())
}

fn write_failures(failures: &[VoxelFailure], out: &Path, manifest: &mut Manifest) -> Result<()> {
    if failures.is_empty() {
        return Ok(());
    }
    warn!(
        "{} voxels failed and were given evidence 0; see {FAILURES}",
        failures.len()
    );
    let mut text = String::from("voxel\ti\tj\tk\tmessage\n");
    for f in failures {
        let [i, j, k] = f.coords;
        writeln!(
            text,
            "{}\t{i}\t{j}\t{k}\t{}",
            f.index,
            f.message.replace(['\t', '\n'], " ")
        )?;
    }
    let path = out.join(FAILURES);
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    manifest.output(&path);
    Ok(())
}

fn mask_strategy(cfg: &mut RunConfig, mask: &Option<PathBuf>, fraction: Option<f64>) -> Result<()> {
    if let Some(path) = mask {
        cfg.mask = MaskStrategy::External { path: path.clone() };
    } else if let Some(fraction) = fraction {
        cfg.mask = MaskStrategy::MeanThreshold { fraction };
    }
    cfg.check()?;
    Ok(())
}

fn masked_volume(path: &Path, cfg: &RunConfig, tr: Option<f64>) -> Result<Bold4D> {
    let mut vol = read_volume(path)?;
    if let Some(tr) = tr {
        vol.tr = tr;
    }
    if !(vol.tr > 0.0) {
        return Err(Error::Config(format!(
            "{}: the header has no repetition time; pass --tr",
            path.display()
        ))
        .into());
    }
    let mask = match &cfg.mask {
        MaskStrategy::External { path } => read_mask(path, vol.dims)?,
        other => build_mask(&vol, other)?,
    };
    vol.apply_mask(mask)?;
    info!(
        "{}: {:?} x {} scans, {} voxels in mask",
        path.display(),
        vol.dims,
        vol.n_scans,
        vol.n_in_mask()
    );
    if vol.n_in_mask() == 0 {
        return Err(Error::Config("mask is empty".into()).into());
    }
    Ok(vol)
}

fn hrf_params(a: &HrfArgs) -> HrfParams {
    let mut p = HrfParams::default();
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut p.peak_delay, a.peak_delay);
    set(&mut p.undershoot_delay, a.undershoot_delay);
    set(&mut p.peak_dispersion, a.peak_dispersion);
    set(&mut p.undershoot_dispersion, a.undershoot_dispersion);
    set(&mut p.undershoot_ratio, a.undershoot_ratio);
    set(&mut p.length, a.hrf_length);
    p
}

pub fn design(a: DesignArgs) -> Result<()> {
    let mut manifest = Manifest::new("design");
    let params = hrf_params(&a.hrf);
    let upsample = a.hrf.upsample.unwrap_or(mvdlm::design::DEFAULT_UPSAMPLE);
    let design = match a.paradigm {
        Some(p) => {
            manifest.seed = Some(a.seed);
            let stim = p.stimulus(a.scans, a.tr, a.seed)?;
            DesignMatrix::from_stimuli(&[stim], a.scans, a.tr, &params, upsample)?
        }
        None => {
            let mut stimuli = Vec::with_capacity(a.stimuli.len());
            for spec in &a.stimuli {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let path = PathBuf::from(spec);
                        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
                        (stem.unwrap_or_else(|| spec.clone()), path)
                    }
                };
                manifest.input(&path)?;
                stimuli.push(StimulusSpec::read(&path, name)?);
            }
            DesignMatrix::from_stimuli(&stimuli, a.scans, a.tr, &params, upsample)?
        }
    };
    manifest.config = json!({
        "paradigm": a.paradigm,
        "tr": a.tr,
        "scans": a.scans,
        "hrf": params,
        "upsample": upsample,
    });
    manifest.config_hash = Some(json_hash(&manifest.config)?);
    echo(&manifest.config)?;
    design.write(&a.out)?;
    manifest.output(&a.out);
    manifest.results = json!({ "tasks": design.task_names, "design_hash": design.content_hash() });
    let mut side = a.out.clone().into_os_string();
    side.push(".manifest.json");
    manifest.write(Path::new(&side))?;
    info!(
        "wrote {} ({} scans, tasks {})",
        a.out.display(),
        design.n_scans(),
        design.task_names.join(", ")
    );
    Ok(())
}

pub fn fit(a: FitArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    mask_strategy(&mut cfg, &a.mask, a.mask_fraction)?;
    echo(&cfg)?;
    let vol = masked_volume(&a.bold, &cfg, a.tr)?;
    let design = load_design(&a.design, vol.tr)?;
    let model = cfg.model(&design.task_names)?;
    let opts = cfg.map_options(&design.task_names)?;
    create_dir(&a.out)?;

    let mut manifest = Manifest::new("fit");
    manifest.seed = Some(cfg.seed);
    manifest.config_hash = Some(cfg.hash());
    manifest.config = serde_json::to_value(&cfg)?;
    manifest.input(&a.bold)?;
    manifest.input(&a.design)?;
    if let MaskStrategy::External { path } = &cfg.mask {
        manifest.input(path)?;
    }

    let maps = if a.no_summary {
        map_subject(&vol, &design, &model, &opts, None)?
    } else {
        let dir = a.out.join(SUMMARY_DIR);
        let meta = SummaryMeta::new(
            vol.dims,
            vol.voxel_size,
            &design,
            cfg.radius,
            &model,
            cfg.standardize,
        );
        let mut writer = SummaryWriter::create(&dir, meta)?;
        let maps = map_subject(&vol, &design, &model, &opts, Some(&mut writer))?;
        writer.finish()?;
        manifest.output(&dir);
        maps
    };
    write_maps(&maps.maps, "evidence", &vol.header, &a.out, &mut manifest)?;
    write_failures(&maps.failures, &a.out, &mut manifest)?;
    manifest.results = json!({
        "voxels_fitted": maps.n_fitted,
        "voxels_failed": maps.failures.len(),
        "active": active_counts(&maps.maps, cfg.threshold),
    });
    manifest.write(&a.out.join(MANIFEST))?;
    report(&maps.maps, cfg.threshold);
    Ok(())
}

fn active_counts(maps: &[EvidenceVolume], threshold: f64) -> serde_json::Value {
    maps.iter()
        .map(|m| {
            (
                m.name.clone(),
                json!(m.values.iter().filter(|&&v| v > threshold).count()),
            )
        })
        .collect::<serde_json::Map<_, _>>()
        .into()
}

fn report(maps: &[EvidenceVolume], threshold: f64) {
    for m in maps {
        let n = m.values.iter().filter(|&&v| v > threshold).count();
        println!("{}\t{n} voxels above {threshold}", m.name);
    }
}

/// Accepts a summary directory or a `fit` output directory holding one.
fn summary_dir(path: &Path) -> PathBuf {
    let nested = path.join(SUMMARY_DIR);
    if nested.join(MANIFEST).is_file() {
        nested
    } else {
        path.to_path_buf()
    }
}

pub fn group(a: GroupArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    echo(&cfg)?;
    let mut manifest = Manifest::new("group");
    manifest.seed = Some(cfg.seed);
    manifest.config_hash = Some(cfg.hash());
    manifest.config = serde_json::to_value(&cfg)?;
    let mut open = |paths: &[PathBuf]| -> Result<Vec<SummaryReader>> {
        paths
            .iter()
            .map(|p| {
                let dir = summary_dir(p);
                manifest.input(&dir)?;
                SummaryReader::open(&dir)
                    .with_context(|| format!("opening summary {}", p.display()))
            })
            .collect()
    };
    let mut group_a = open(&a.subjects)?;
    let mut group_b = open(&a.versus)?;
    let meta = group_a[0].meta().clone();
    info!(
        "model settings (beta, burn-in, radius, standardization) come from the summaries: {}",
        serde_json::to_string(&meta.config)?
    );
    let opts = cfg.map_options(&meta.task_names)?;
    create_dir(&a.out)?;
    let maps = map_group(&mut group_a, &mut group_b, &opts)?;
    let header = NiftiHeader::new(meta.voxel_size, meta.tr);
    let prefix = if group_b.is_empty() {
        "group"
    } else {
        "difference"
    };
    write_maps(&maps.maps, prefix, &header, &a.out, &mut manifest)?;
    write_failures(&maps.failures, &a.out, &mut manifest)?;
    manifest.results = json!({
        "subjects": [maps.n_subjects.0, maps.n_subjects.1],
        "shared_design": maps.shared_design,
        "voxels_fitted": maps.n_fitted,
        "voxels_failed": maps.failures.len(),
        "active": active_counts(&maps.maps, cfg.threshold),
    });
    manifest.write(&a.out.join(MANIFEST))?;
    report(&maps.maps, cfg.threshold);
    Ok(())
}

/// A phantom plus the design that drives it.
#[derive(Debug, Serialize, Deserialize)]
struct SimulateSpec {
    #[serde(flatten)]
    phantom: PhantomSpec,
    /// Design CSV, relative to the phantom file.
    #[serde(default)]
    design: Option<PathBuf>,
    /// Built-in paradigm used when no design file is given.
    #[serde(default)]
    paradigm: Option<Paradigm>,
    #[serde(default)]
    n_scans: Option<usize>,
    #[serde(default)]
    tr: Option<f64>,
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut spec: SimulateSpec = read_json(&a.spec)?;
    if let Some(d) = &a.design {
        spec.design = Some(d.clone());
    } else if let Some(d) = &spec.design {
        spec.design = Some(a.spec.parent().unwrap_or(Path::new(".")).join(d));
    }
    if a.tr.is_some() {
        spec.tr = a.tr;
    }
    let tr = spec
        .tr
        .ok_or_else(|| Error::Config("the repetition time is missing (field tr or --tr)".into()))?;
    echo(&spec)?;
    let mut manifest = Manifest::new("simulate");
    manifest.input(&a.spec)?;
    let design = match (&spec.design, spec.paradigm) {
        (Some(path), _) => {
            manifest.input(path)?;
            load_design(path, tr)?
        }
        (None, Some(p)) => {
            let n = spec.n_scans.ok_or_else(|| {
                Error::Config("a paradigm needs n_scans in the phantom file".into())
            })?;
            p.design(n, tr, spec.phantom.seed)?
        }
        (None, None) => {
            return Err(Error::Config(
                "the phantom file names neither a design nor a paradigm".into(),
            )
            .into())
        }
    };
    let phantom = generate_phantom(&spec.phantom, &design)?;
    create_dir(&a.out)?;
    manifest.seed = Some(spec.phantom.seed);
    manifest.config = serde_json::to_value(&spec)?;
    manifest.config_hash = Some(json_hash(&manifest.config)?);

    let bold = a.out.join("bold.nii.gz");
    phantom.volume.write(&bold)?;
    manifest.output(&bold);
    let truth = a.out.join("truth.nii.gz");
    let truth_values: Vec<f64> = phantom
        .truth
        .iter()
        .map(|&t| f64::from(u8::from(t)))
        .collect();
    phantom.volume.write_map(&truth, &truth_values)?;
    manifest.output(&truth);
    let design_out = a.out.join("design.csv");
    design.write(&design_out)?;
    manifest.output(&design_out);
    let n_active = phantom.truth.iter().filter(|&&t| t).count();
    manifest.results = json!({
        "noise_sd": spec.phantom.noise_sd(&design),
        "active_voxels": n_active,
    });
    manifest.write(&a.out.join(MANIFEST))?;
    info!("wrote {} ({n_active} active voxels)", a.out.display());
    Ok(())
}

/// Resting data generated on the fly.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NullSpec {
    dims: [usize; 3],
    n_scans: usize,
    tr: f64,
    #[serde(default)]
    noise: NoiseModel,
    #[serde(default)]
    seed: u64,
}

pub fn assess(a: AssessArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    mask_strategy(&mut cfg, &a.mask, a.mask_fraction)?;
    echo(&cfg)?;
    let mut manifest = Manifest::new("assess");
    manifest.seed = Some(cfg.seed);
    manifest.config_hash = Some(cfg.hash());
    manifest.config = serde_json::to_value(&cfg)?;
    let vol = match (&a.null, &a.generate) {
        (Some(path), _) => {
            manifest.input(path)?;
            masked_volume(path, &cfg, a.tr)?
        }
        (None, Some(path)) => {
            manifest.input(path)?;
            let spec: NullSpec = read_json(path)?;
            let mut vol =
                generate_resting(spec.dims, spec.n_scans, spec.tr, spec.noise, spec.seed)?;
            let mask = match &cfg.mask {
                MaskStrategy::External { path } => read_mask(path, vol.dims)?,
                other => build_mask(&vol, other)?,
            };
            vol.apply_mask(mask)?;
            vol
        }
        (None, None) => return Err(Error::Config("pass --null or --generate".into()).into()),
    };
    create_dir(&a.out)?;
    let paradigms = if a.paradigm.is_empty() {
        Paradigm::ALL.to_vec()
    } else {
        a.paradigm.clone()
    };
    let mut results = serde_json::Map::new();
    for p in paradigms {
        let design = p.design(vol.n_scans, vol.tr, cfg.seed)?;
        let model = cfg.model(&design.task_names)?;
        let opts = cfg.map_options(&design.task_names)?;
        let fpr = assess_fpr(&vol, &design, &model, &opts)?;
        let path = a.out.join(format!("fpr_{p}.csv"));
        fpr.write_csv(&path, vol.dims, cfg.threshold)?;
        manifest.output(&path);
        println!(
            "{p}\trate {:.6}\t{} of {} voxels\t{} failed",
            fpr.rate, fpr.n_active, fpr.n_voxels, fpr.n_failed
        );
        results.insert(
            p.to_string(),
            json!({
                "rate": fpr.rate,
                "active": fpr.n_active,
                "voxels": fpr.n_voxels,
                "failed": fpr.n_failed,
            }),
        );
    }
    manifest.results = results.into();
    manifest.write(&a.out.join(MANIFEST))?;
    Ok(())
}
