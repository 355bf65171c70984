//! Expected BOLD regressors: stimulus trains convolved with a double-gamma
//! haemodynamic response, and the `T x p` design matrices built from them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const DEFAULT_UPSAMPLE: usize = 16;

/// Double-gamma response parameters, all in seconds except the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HrfParams {
    pub peak_delay: f64,
    pub undershoot_delay: f64,
    pub peak_dispersion: f64,
    pub undershoot_dispersion: f64,
    pub undershoot_ratio: f64,
    pub length: f64,
}

impl Default for HrfParams {
    fn default() -> Self {
        Self {
            peak_delay: 6.0,
            undershoot_delay: 16.0,
            peak_dispersion: 1.0,
            undershoot_dispersion: 1.0,
            undershoot_ratio: 1.0 / 6.0,
            length: 32.0,
        }
    }
}

impl HrfParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.peak_delay,
            self.undershoot_delay,
            self.peak_dispersion,
            self.undershoot_dispersion,
            self.undershoot_ratio,
            self.length,
        ];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "HRF parameters must be positive: {self:?}"
            )));
        }
        if self.length < self.undershoot_delay {
            return Err(Error::Parameter(format!(
                "HRF length {} is shorter than the undershoot delay {}",
                self.length, self.undershoot_delay
            )));
        }
        Ok(())
    }
}

/// Gamma density with the given mode-style delay/dispersion parameterization
/// (shape `delay / dispersion`, scale `dispersion`).
fn gamma_pdf(t: f64, delay: f64, dispersion: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let shape = delay / dispersion;
    let log_pdf =
        (shape - 1.0) * t.ln() - t / dispersion - ln_gamma(shape) - shape * dispersion.ln();
    log_pdf.exp()
}

/// Peak-normalized double-gamma response.
#[derive(Debug, Clone)]
pub struct Hrf {
    params: HrfParams,
    peak: f64,
}

impl Hrf {
    pub fn new(params: HrfParams) -> Result<Self> {
        params.validate()?;
        let raw = |t: f64| {
            gamma_pdf(t, params.peak_delay, params.peak_dispersion)
                - params.undershoot_ratio
                    * gamma_pdf(t, params.undershoot_delay, params.undershoot_dispersion)
        };
        // coarse grid, then golden-section refinement around the best node
        let step = 0.01;
        let nodes = (params.length / step).ceil() as usize;
        let best = (0..=nodes)
            .map(|i| i as f64 * step)
            .max_by(|a, b| raw(*a).total_cmp(&raw(*b)))
            .unwrap_or(0.0);
        let (mut lo, mut hi) = ((best - step).max(0.0), (best + step).min(params.length));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let x1 = hi - g * (hi - lo);
            let x2 = lo + g * (hi - lo);
            if raw(x1) < raw(x2) {
                lo = x1;
            } else {
                hi = x2;
            }
        }
        let peak = raw(0.5 * (lo + hi)).max(raw(best));
        if !(peak > 0.0) {
            return Err(Error::Parameter(
                "HRF has no positive peak on its support".into(),
            ));
        }
        Ok(Self { params, peak })
    }

    pub fn params(&self) -> &HrfParams {
        &self.params
    }

    /// Response at `t` seconds after an impulse; zero outside `(0, length]`.
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 || t > self.params.length {
            return 0.0;
        }
        let p = &self.params;
        (gamma_pdf(t, p.peak_delay, p.peak_dispersion)
            - p.undershoot_ratio * gamma_pdf(t, p.undershoot_delay, p.undershoot_dispersion))
            / self.peak
    }

    /// Kernel sampled at `k·dt` for `k·dt ≤ length`.
    pub fn kernel(&self, dt: f64) -> Vec<f64> {
        let n = (self.params.length / dt + 1e-9).floor() as usize;
        (0..=n).map(|k| self.eval(k as f64 * dt)).collect()
    }
}

/// Double-gamma response at `t`, normalized so its peak is 1.
pub fn canonical_hrf(t: f64, params: &HrfParams) -> Result<f64> {
    Ok(Hrf::new(*params)?.eval(t))
}

/// Onsets and durations of one stimulus type, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub name: String,
    pub onsets: Vec<f64>,
    pub durations: Vec<f64>,
}

// Tolerance for placing onsets on the sampling grid.
const GRID_EPS: f64 = 1e-9;

impl StimulusSpec {
    pub fn new(name: impl Into<String>, onsets: Vec<f64>, durations: Vec<f64>) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            onsets,
            durations,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.onsets.len() != self.durations.len() {
            return Err(Error::Parameter(format!(
                "stimulus '{}' has {} onsets but {} durations",
                self.name,
                self.onsets.len(),
                self.durations.len()
            )));
        }
        for (i, (&o, &d)) in self.onsets.iter().zip(&self.durations).enumerate() {
            if !(o >= 0.0) || !o.is_finite() {
                return Err(Error::Parameter(format!(
                    "stimulus '{}': onset {i} = {o} is negative",
                    self.name
                )));
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Parameter(format!(
                    "stimulus '{}': duration {i} = {d} is not positive",
                    self.name
                )));
            }
            if i > 0 && !(o > self.onsets[i - 1]) {
                return Err(Error::Parameter(format!(
                    "stimulus '{}': onsets must be strictly increasing (onset {i} = {o})",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Indicator `f(i·dt)` on `n` grid points: 1 while `onset ≤ t < onset + duration`.
    pub fn boxcar(&self, n: usize, dt: f64) -> Vec<f64> {
        let mut f = vec![0.0; n];
        for (&o, &d) in self.onsets.iter().zip(&self.durations) {
            let start = (o / dt - GRID_EPS).ceil().max(0.0) as usize;
            let end = (((o + d) / dt - GRID_EPS).ceil().max(0.0) as usize).min(n);
            for v in f.iter_mut().take(end).skip(start) {
                *v = 1.0;
            }
        }
        f
    }

    /// Parses a 2- or 3-column timing file (onset, duration[, amplitude]).
    /// Columns may be separated by whitespace or commas; `#` starts a comment.
    /// The amplitude column is ignored.
    pub fn read(path: impl AsRef<Path>, name: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut onsets = Vec::new();
        let mut durations = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let cols: Vec<&str> = body
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if !(2..=3).contains(&cols.len()) {
                return Err(Error::format(
                    path,
                    format!(
                        "line {}: expected 2 or 3 columns, found {}",
                        lineno + 1,
                        cols.len()
                    ),
                ));
            }
            let parse = |s: &str, what: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::format(path, format!("line {}: bad {what} '{s}'", lineno + 1))
                    })
            };
            onsets.push(parse(cols[0], "onset")?);
            durations.push(parse(cols[1], "duration")?);
        }
        Self::new(name, onsets, durations)
    }
}

/// Unnormalized expected response on the scan grid.
///
/// The boxcar is sampled at `tr / upsample`, convolved with the kernel by
/// direct summation and read back at the scan times.
pub fn expected_bold_raw(
    stim: &StimulusSpec,
    n_scans: usize,
    tr: f64,
    hrf: &Hrf,
    upsample: usize,
) -> Result<Vec<f64>> {
    if n_scans == 0 {
        return Err(Error::Parameter("need at least one scan".into()));
    }
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::Parameter(format!(
            "repetition time {tr} must be positive"
        )));
    }
    if upsample == 0 {
        return Err(Error::Parameter(
            "upsample factor must be at least 1".into(),
        ));
    }
    stim.validate()?;
    let dt = tr / upsample as f64;
    let n_fine = n_scans * upsample;
    let f = stim.boxcar(n_fine, dt);
    let kernel = hrf.kernel(dt);
    let mut out = vec![0.0; n_scans];
    for (s, x) in out.iter_mut().enumerate() {
        let i = s * upsample;
        let kmax = kernel.len().min(i + 1);
        *x = (0..kmax).map(|k| kernel[k] * f[i - k]).sum();
    }
    Ok(out)
}

/// Expected BOLD regressor for one stimulus, max-normalized to 1.
///
/// A stimulus with no onsets inside the scan window yields the zero vector.
pub fn expected_bold(
    stim: &StimulusSpec,
    n_scans: usize,
    tr: f64,
    params: &HrfParams,
    upsample: usize,
) -> Result<Vec<f64>> {
    let hrf = Hrf::new(*params)?;
    let mut x = expected_bold_raw(stim, n_scans, tr, &hrf, upsample)?;
    let window = n_scans as f64 * tr;
    if !stim.onsets.is_empty() && stim.onsets.iter().all(|&o| o >= window) {
        log::warn!(
            "stimulus '{}': every onset lies beyond the {window} s scan window; regressor is empty",
            stim.name
        );
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(x)
}

/// `T x p` matrix of regressors; row `t` is `F_t'`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    /// Repetition time in seconds.
    pub tr: f64,
    pub task_names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, tr: f64, task_names: Vec<String>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::Parameter(
                "design needs at least one scan and one regressor".into(),
            ));
        }
        if task_names.len() != values.ncols() {
            return Err(Error::Parameter(format!(
                "{} task names for {} regressors",
                task_names.len(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::Data(format!(
                "design entry ({r}, {c}) is not finite"
            )));
        }
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::Parameter(format!(
                "repetition time {tr} must be positive"
            )));
        }
        Ok(Self {
            values,
            tr,
            task_names,
        })
    }

    /// Convolves each stimulus with the response and stacks the regressors.
    pub fn from_stimuli(
        stimuli: &[StimulusSpec],
        n_scans: usize,
        tr: f64,
        params: &HrfParams,
        upsample: usize,
    ) -> Result<Self> {
        if stimuli.is_empty() {
            return Err(Error::Parameter("at least one stimulus is required".into()));
        }
        let columns = stimuli
            .iter()
            .map(|s| expected_bold(s, n_scans, tr, params, upsample))
            .collect::<Result<Vec<_>>>()?;
        let values = DMatrix::from_fn(n_scans, stimuli.len(), |t, l| columns[l][t]);
        Self::new(values, tr, stimuli.iter().map(|s| s.name.clone()).collect())
    }

    pub fn n_scans(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_regressors(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.values.row(t).iter().cloned().collect()
    }

    /// Copy with every column shifted to zero mean over the scans.
    pub fn centered(&self) -> DesignMatrix {
        let mut values = self.values.clone();
        for mut col in values.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        DesignMatrix {
            values,
            tr: self.tr,
            task_names: self.task_names.clone(),
        }
    }

    /// Stable hex digest of the regressors, repetition time and names.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_scans() as u64).to_le_bytes());
        h.update((self.n_regressors() as u64).to_le_bytes());
        h.update(self.tr.to_le_bytes());
        for v in self.values.iter() {
            h.update(v.to_le_bytes());
        }
        for name in &self.task_names {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the CSV form read by [`load_design`].
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", self.task_names.join(",")).map_err(io)?;
        for t in 0..self.n_scans() {
            let row: Vec<String> = self.values.row(t).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads a design CSV: a header row of task names, then `T` rows of `p`
/// numeric cells. The repetition time is not stored in the file.
pub fn load_design(path: impl AsRef<Path>, tr: f64) -> Result<DesignMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        })?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| Error::format(path, format!("header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if names.is_empty() || names.iter().any(String::is_empty) {
        return Err(Error::format(path, "header row must name every column"));
    }
    let p = names.len();
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::format(path, format!("row {row}: {e}")))?;
        if record.len() != p {
            return Err(Error::format(
                path,
                format!("row {row}: expected {p} cells, found {}", record.len()),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            let v = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::format(
                        path,
                        format!("row {row}, column '{}': invalid value '{cell}'", names[col]),
                    )
                })?;
            data.push(v);
        }
    }
    let t_len = data.len() / p;
    if t_len == 0 {
        return Err(Error::format(path, "design has no data rows"));
    }
    DesignMatrix::new(DMatrix::from_row_slice(t_len, p, &data), tr, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hrf() -> Hrf {
        Hrf::new(HrfParams::default()).unwrap()
    }

    #[test]
    fn response_vanishes_at_zero_and_negative_times() {
        let h = hrf();
        assert_eq!(h.eval(0.0), 0.0);
        assert_eq!(h.eval(-3.0), 0.0);
    }

    #[test]
    fn default_response_peaks_near_five_seconds() {
        let h = hrf();
        let (arg, val) = (0..=320)
            .map(|i| (i as f64 * 0.1, h.eval(i as f64 * 0.1)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!((4.5..=6.5).contains(&arg), "argmax {arg}");
        assert!((val - 1.0).abs() < 1e-6);
    }

    #[test]
    fn response_decays_by_the_end_of_support() {
        let h = hrf();
        assert!(h.eval(32.0).abs() < 0.02);
        assert!(h.eval(31.9).abs() < 0.02);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = HrfParams {
            length: 10.0,
            ..HrfParams::default()
        };
        assert!(Hrf::new(p).is_err());
        let p = HrfParams {
            peak_dispersion: 0.0,
            ..HrfParams::default()
        };
        assert!(Hrf::new(p).is_err());
    }

    #[test]
    fn empty_stimulus_gives_zero_regressor() {
        let s = StimulusSpec::new("none", vec![], vec![]).unwrap();
        let x = expected_bold(&s, 50, 2.0, &HrfParams::default(), 16).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn onsets_beyond_window_give_zero_regressor() {
        let s = StimulusSpec::new("late", vec![500.0], vec![10.0]).unwrap();
        let x = expected_bold(&s, 50, 2.0, &HrfParams::default(), 16).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_recovers_the_kernel() {
        let s = StimulusSpec::new("impulse", vec![0.0], vec![0.1]).unwrap();
        let x = expected_bold(&s, 20, 2.0, &HrfParams::default(), 16).unwrap();
        let h = hrf();
        let kernel: Vec<f64> = (0..20).map(|i| h.eval(i as f64 * 2.0)).collect();
        let scale = x[3] / kernel[3];
        for (a, b) in x.iter().zip(&kernel) {
            assert!((a - scale * b).abs() < 1e-12);
        }
    }

    #[test]
    fn stimulus_validation() {
        assert!(StimulusSpec::new("a", vec![1.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(StimulusSpec::new("a", vec![-1.0], vec![1.0]).is_err());
        assert!(StimulusSpec::new("a", vec![1.0], vec![0.0]).is_err());
        assert!(StimulusSpec::new("a", vec![1.0], vec![]).is_err());
    }

    #[test]
    fn boxcar_follows_half_open_intervals() {
        let s = StimulusSpec::new("b", vec![10.0, 30.0], vec![10.0, 10.0]).unwrap();
        let f = s.boxcar(20, 2.0);
        let on: Vec<usize> = f
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(on, vec![5, 6, 7, 8, 9, 15, 16, 17, 18, 19]);
    }

    #[test]
    fn design_rejects_bad_shapes() {
        assert!(DesignMatrix::new(DMatrix::zeros(3, 1), 2.0, vec![]).is_err());
        assert!(
            DesignMatrix::new(DMatrix::from_element(3, 1, f64::NAN), 2.0, vec!["a".into()])
                .is_err()
        );
        assert!(DesignMatrix::new(DMatrix::zeros(3, 1), 0.0, vec!["a".into()]).is_err());
    }

    #[test]
    fn hash_depends_on_values() {
        let a = DesignMatrix::new(DMatrix::from_element(3, 1, 1.0), 2.0, vec!["a".into()]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.values[(1, 0)] = 0.5;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
