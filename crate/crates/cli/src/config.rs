use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use mvdlm::dlm::{DEFAULT_BETA, DEFAULT_BURN_IN, DEFAULT_PRIOR_C_SCALE, DEFAULT_PRIOR_N};
use mvdlm::{
    Algorithm, EffectKind, Error, MapOptions, MaskStrategy, ModelConfig, DEFAULT_DRAWS,
    DEFAULT_THRESHOLD,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const WORKERS_ENV: &str = "MVDLM_WORKERS";

/// Model and sampling settings shared by `fit`, `group` and `assess`.
///
/// Read from a JSON file with `--config`; command-line flags override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub kind: EffectKind,
    pub draws: usize,
    pub threshold: f64,
    pub burn_in: usize,
    /// One value for every regressor, or one per regressor.
    pub beta: Vec<f64>,
    /// Squared neighborhood radius, 1..=4.
    pub radius: u32,
    pub seed: u64,
    /// 0 uses every core.
    pub workers: usize,
    pub standardize: bool,
    pub v_scale: f64,
    pub prior_c_scale: f64,
    pub prior_n: f64,
    /// Task differences as `a:b`, by name or 0-based index.
    pub contrasts: Vec<String>,
    pub mask: MaskStrategy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Fest,
            kind: EffectKind::Marginal,
            draws: DEFAULT_DRAWS,
            threshold: DEFAULT_THRESHOLD,
            burn_in: DEFAULT_BURN_IN,
            beta: vec![DEFAULT_BETA],
            radius: 1,
            seed: 0,
            workers: 0,
            standardize: true,
            v_scale: 1.0,
            prior_c_scale: DEFAULT_PRIOR_C_SCALE,
            prior_n: DEFAULT_PRIOR_N,
            contrasts: Vec::new(),
            mask: MaskStrategy::default(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; flags given here take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_algorithm)]
    pub algorithm: Option<Algorithm>,
    /// marginal, average or joint.
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<EffectKind>,
    /// Monte Carlo draws per voxel.
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// First retained scan (1-based).
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Discount factor(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub beta: Option<Vec<f64>>,
    /// Squared neighborhood radius.
    #[arg(long)]
    pub radius: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to the config file, then MVDLM_WORKERS.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Fit the series as given, without standardizing or centering.
    #[arg(long)]
    pub no_standardize: bool,
    /// Task difference `a:b` to map as well (repeatable).
    #[arg(long = "contrast", value_name = "A:B")]
    pub contrasts: Vec<String>,
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<EffectKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ConfigArgs {
    /// File values, then flags, then the environment for an unset worker count.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_json::<RunConfig>(path)?,
            None => RunConfig::default(),
        };
        let file_workers = self.config.is_some() && cfg.workers != 0;
        if let Some(v) = self.algorithm {
            cfg.algorithm = v;
        }
        if let Some(v) = self.kind {
            cfg.kind = v;
        }
        if let Some(v) = self.draws {
            cfg.draws = v;
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in = v;
        }
        if let Some(v) = &self.beta {
            cfg.beta = v.clone();
        }
        if let Some(v) = self.radius {
            cfg.radius = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.no_standardize {
            cfg.standardize = false;
        }
        if !self.contrasts.is_empty() {
            cfg.contrasts = self.contrasts.clone();
        }
        match self.workers {
            Some(v) => cfg.workers = v,
            None if !file_workers => {
                if let Ok(raw) = std::env::var(WORKERS_ENV) {
                    cfg.workers = raw.trim().parse().map_err(|_| {
                        Error::Config(format!("{WORKERS_ENV}={raw:?} is not a worker count"))
                    })?;
                }
            }
            None => {}
        }
        cfg.check()?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// Range checks that do not depend on the data.
    pub fn check(&self) -> Result<(), Error> {
        if self.draws == 0 {
            return Err(Error::Config("draws must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "threshold {} is outside (0, 1]",
                self.threshold
            )));
        }
        if self.burn_in == 0 {
            return Err(Error::Config(
                "burn_in is 1-based and must be at least 1".into(),
            ));
        }
        if self.beta.is_empty() {
            return Err(Error::Config("beta needs at least one value".into()));
        }
        if let Some(b) = self.beta.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(Error::Config(format!(
                "discount factor {b} is outside (0, 1]"
            )));
        }
        if !(1..=4).contains(&self.radius) {
            return Err(Error::Config(format!(
                "radius {} is outside 1..=4",
                self.radius
            )));
        }
        if !(self.v_scale > 0.0 && self.prior_c_scale > 0.0 && self.prior_n > 0.0) {
            return Err(Error::Config(
                "v_scale, prior_c_scale and prior_n must be positive".into(),
            ));
        }
        if let MaskStrategy::MeanThreshold { fraction } = self.mask {
            if !(0.0..1.0).contains(&fraction) {
                return Err(Error::Config(format!(
                    "mask fraction {fraction} is outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn model(&self, task_names: &[String]) -> Result<ModelConfig, Error> {
        let p = task_names.len();
        let beta = match self.beta.len() {
            1 => vec![self.beta[0]; p],
            n if n == p => self.beta.clone(),
            n => {
                return Err(Error::Config(format!(
                    "{n} discount factors given for {p} regressors"
                )))
            }
        };
        let cfg = ModelConfig {
            beta,
            v_scale: self.v_scale,
            prior_m: None,
            prior_c_scale: self.prior_c_scale,
            prior_s: None,
            prior_n: self.prior_n,
            burn_in: self.burn_in,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn map_options(&self, task_names: &[String]) -> Result<MapOptions, Error> {
        let contrasts = self
            .contrasts
            .iter()
            .map(|c| parse_contrast(c, task_names))
            .collect::<Result<Vec<_>, _>>()?;
        let opts = MapOptions {
            algorithm: self.algorithm,
            kind: self.kind,
            n_draws: self.draws,
            threshold: self.threshold,
            seed: self.seed,
            radius: self.radius,
            standardize: self.standardize,
            contrasts,
            workers: self.workers,
        };
        opts.validate(task_names.len())?;
        Ok(opts)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn parse_contrast(spec: &str, task_names: &[String]) -> Result<(usize, usize), Error> {
    let task = |s: &str| {
        let s = s.trim();
        task_names
            .iter()
            .position(|n| n == s)
            .or_else(|| s.parse::<usize>().ok().filter(|&i| i < task_names.len()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "contrast '{spec}': no task '{s}' among {}",
                    task_names.join(", ")
                ))
            })
    };
    let (a, b) = spec
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("contrast '{spec}' is not of the form a:b")))?;
    Ok((task(a)?, task(b)?))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).with_context(|| format!("{}: cannot parse JSON", path.display()))
}
