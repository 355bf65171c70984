//! 4-D BOLD volumes, masks, voxel neighborhoods and posterior summaries.

pub mod cluster;
pub mod nifti;
pub mod summary;

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use cluster::{coords, linear_index, neighborhood, neighborhood_offsets, ClusterIndex};
pub use nifti::{read_nifti, write_nifti, NiftiHeader, NiftiImage};

/// A 4-D acquisition with its analysis mask.
///
/// Series are stored voxel-major: the series of voxel `v` (linear index
/// `i + d1·(j + d2·k)`) is `data[v·T .. (v+1)·T]`.
#[derive(Debug, Clone)]
pub struct Bold4D {
    pub dims: [usize; 3],
    pub n_scans: usize,
    pub voxel_size: [f64; 3],
    /// Repetition time in seconds.
    pub tr: f64,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
    pub header: NiftiHeader,
}

impl Bold4D {
    /// Builds a volume from voxel-major data. The mask starts as every voxel
    /// with a finite, non-constant series.
    pub fn new(
        dims: [usize; 3],
        n_scans: usize,
        voxel_size: [f64; 3],
        tr: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        let n_vox = dims.iter().product::<usize>();
        if n_vox == 0 || n_scans == 0 {
            return Err(Error::Parameter(format!(
                "empty volume {dims:?} x {n_scans}"
            )));
        }
        if data.len() != n_vox * n_scans {
            return Err(Error::Parameter(format!(
                "{} values do not fill a {dims:?} x {n_scans} volume",
                data.len()
            )));
        }
        let mut vol = Self {
            dims,
            n_scans,
            voxel_size,
            tr,
            data,
            mask: vec![true; n_vox],
            header: NiftiHeader::new(voxel_size, tr),
        };
        vol.mask = (0..n_vox).map(|v| vol.usable(v)).collect();
        Ok(vol)
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn series(&self, v: usize) -> &[f64] {
        &self.data[v * self.n_scans..(v + 1) * self.n_scans]
    }

    /// Finite with positive variance.
    pub fn usable(&self, v: usize) -> bool {
        let s = self.series(v);
        s.iter().all(|x| x.is_finite()) && s.iter().any(|&x| x != s[0])
    }

    pub fn mean_image(&self) -> Vec<f64> {
        (0..self.n_voxels())
            .map(|v| self.series(v).iter().sum::<f64>() / self.n_scans as f64)
            .collect()
    }

    pub fn n_in_mask(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Linear indices of in-mask voxels, ascending.
    pub fn mask_indices(&self) -> Vec<usize> {
        (0..self.n_voxels()).filter(|&v| self.mask[v]).collect()
    }

    /// Adopts `mask`, dropping voxels whose series are unusable.
    pub fn apply_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.n_voxels() {
            return Err(Error::Metadata(format!(
                "mask has {} voxels but the volume has {}",
                mask.len(),
                self.n_voxels()
            )));
        }
        let mut dropped = 0;
        self.mask = mask
            .into_iter()
            .enumerate()
            .map(|(v, m)| {
                let keep = m && self.usable(v);
                dropped += usize::from(m && !keep);
                keep
            })
            .collect();
        if dropped > 0 {
            log::warn!(
                "{dropped} masked-in voxels have constant or non-finite series and were excluded"
            );
        }
        if self.n_in_mask() == 0 {
            return Err(Error::Config("mask is empty".into()));
        }
        Ok(())
    }

    /// Standardizes every in-mask series to mean 0 and unit sample variance.
    pub fn standardize(&mut self) {
        let t = self.n_scans;
        for v in 0..self.n_voxels() {
            if self.mask[v] && t > 1 {
                standardize_in_place(&mut self.data[v * t..(v + 1) * t]);
            }
        }
    }

    /// Writes the 4-D data under this volume's header.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.n_voxels();
        let t = self.n_scans;
        let mut file_order = vec![0.0; n * t];
        for v in 0..n {
            for s in 0..t {
                file_order[v + n * s] = self.data[v * t + s];
            }
        }
        write_nifti(
            path,
            &[self.dims[0], self.dims[1], self.dims[2], t],
            &file_order,
            &self.header,
        )
    }

    /// Writes a 3-D map (one value per voxel) with this volume's geometry.
    pub fn write_map(&self, path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
        write_volume(values, &self.dims, &self.header, path)
    }
}

/// Mean 0, sample variance 1; constant input is left centered.
pub fn standardize_in_place(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    for v in x.iter_mut() {
        *v -= mean;
        if sd > 0.0 {
            *v /= sd;
        }
    }
}

/// Reads a 4-D NIfTI-1 series (a 3-D file is read as one scan).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Bold4D> {
    let path = path.as_ref();
    let img = read_nifti(path)?;
    if img.dims.len() > 4 {
        return Err(Error::format(
            path,
            format!("expected a 3-D or 4-D image, got {:?}", img.dims),
        ));
    }
    let dims = [
        img.dims[0],
        img.dims.get(1).copied().unwrap_or(1),
        img.dims.get(2).copied().unwrap_or(1),
    ];
    let t = img.dims.get(3).copied().unwrap_or(1);
    let n = dims.iter().product::<usize>();
    let mut data = vec![0.0; n * t];
    for s in 0..t {
        for v in 0..n {
            data[v * t + s] = img.data[v + n * s];
        }
    }
    let mut vol = Bold4D::new(dims, t, img.header.voxel_size(), img.header.tr(), data)?;
    vol.header = img.header;
    Ok(vol)
}

/// Writes a 3-D map (`values.len() == d1·d2·d3`) or a 4-D block in file
/// order as float32, keeping the template's spatial header fields.
pub fn write_volume(
    values: &[f64],
    dims: &[usize],
    template: &NiftiHeader,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_nifti(path, dims, values, template)
}

/// Reads a 3-D mask image; nonzero voxels are in.
pub fn read_mask(path: impl AsRef<Path>, dims: [usize; 3]) -> Result<Vec<bool>> {
    let path = path.as_ref();
    let img = read_nifti(path)?;
    let extent: Vec<usize> = img
        .dims
        .iter()
        .copied()
        .chain(std::iter::repeat(1))
        .take(4)
        .collect();
    if extent[..3] != dims || extent[3] != 1 {
        return Err(Error::Metadata(format!(
            "{}: mask extent {:?} does not match volume {dims:?}",
            path.display(),
            img.dims
        )));
    }
    Ok(img
        .data
        .iter()
        .map(|&v| v != 0.0 && v.is_finite())
        .collect())
}

/// How the analysis mask is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum MaskStrategy {
    /// A 3-D NIfTI image; nonzero voxels are in.
    External { path: PathBuf },
    /// Voxels whose mean exceeds `fraction` of the 98th percentile of means.
    MeanThreshold { fraction: f64 },
    /// Every voxel with a non-constant series.
    NonzeroVariance,
}

impl Default for MaskStrategy {
    fn default() -> Self {
        MaskStrategy::NonzeroVariance
    }
}

/// Robust maximum used by [`MaskStrategy::MeanThreshold`].
pub const ROBUST_MAX_PERCENTILE: f64 = 0.98;

/// Evaluates `strategy`; constant and non-finite series are always out.
pub fn build_mask(vol: &Bold4D, strategy: &MaskStrategy) -> Result<Vec<bool>> {
    let n = vol.n_voxels();
    let usable: Vec<bool> = (0..n).map(|v| vol.usable(v)).collect();
    let mask: Vec<bool> = match strategy {
        MaskStrategy::External { path } => read_mask(path, vol.dims)?
            .into_iter()
            .zip(&usable)
            .map(|(m, &u)| m && u)
            .collect(),
        MaskStrategy::MeanThreshold { fraction } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::Parameter(format!(
                    "mask fraction {fraction} is outside [0, 1]"
                )));
            }
            let means = vol.mean_image();
            let mut sorted: Vec<f64> = means.iter().copied().filter(|v| v.is_finite()).collect();
            sorted.sort_by(f64::total_cmp);
            let robust_max = sorted
                .get(
                    ((sorted.len().saturating_sub(1)) as f64 * ROBUST_MAX_PERCENTILE).round()
                        as usize,
                )
                .copied()
                .unwrap_or(0.0);
            let cut = fraction * robust_max;
            means
                .iter()
                .zip(&usable)
                .map(|(&m, &u)| u && m > cut)
                .collect()
        }
        MaskStrategy::NonzeroVariance => usable,
    };
    if !mask.iter().any(|&m| m) {
        return Err(Error::Config("mask is empty".into()));
    }
    Ok(mask)
}

/// `T x q` matrix whose column `n` is the series of `cluster.neighbors[n]`,
/// optionally standardized column by column.
pub fn extract_series(vol: &Bold4D, cluster: &ClusterIndex, standardize: bool) -> DMatrix<f64> {
    let t = vol.n_scans;
    let mut out = DMatrix::zeros(t, cluster.q());
    for (col, &ijk) in cluster.neighbors.iter().enumerate() {
        let v = linear_index(vol.dims, ijk);
        let mut column = out.column_mut(col);
        column.copy_from_slice(vol.series(v));
        if standardize && t > 1 {
            standardize_in_place(column.as_mut_slice());
        }
    }
    out
}
