#![allow(dead_code)]

use mvdlm::design::{DesignMatrix, HrfParams, StimulusSpec};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Block paradigm starting with rest: `off` s rest, `on` s stimulus, repeated.
pub fn block_stimulus(
    name: &str,
    n_scans: usize,
    tr: f64,
    on: f64,
    off: f64,
    shift: f64,
) -> StimulusSpec {
    let mut onsets = Vec::new();
    let mut t = off + shift;
    while t < n_scans as f64 * tr {
        onsets.push(t);
        t += on + off;
    }
    let durations = vec![on; onsets.len()];
    StimulusSpec::new(name, onsets, durations).unwrap()
}

pub fn block_design(n_scans: usize, tr: f64, on: f64, off: f64) -> DesignMatrix {
    let s = block_stimulus("task", n_scans, tr, on, off, 0.0);
    DesignMatrix::from_stimuli(&[s], n_scans, tr, &HrfParams::default(), 16).unwrap()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `Y = X B + E` with i.i.d. standard normal `E` scaled by `sd`.
pub fn synthetic<R: Rng + ?Sized>(
    design: &DesignMatrix,
    b: &DMatrix<f64>,
    sd: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let mean = &design.values * b;
    DMatrix::from_fn(mean.nrows(), mean.ncols(), |i, j| {
        mean[(i, j)] + sd * normal(rng)
    })
}

/// Sample mean and variance.
pub fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}
