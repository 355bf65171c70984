//! Benchmark fixtures shared by the criterion targets.

use mvdlm::{generate_resting, DesignMatrix, NoiseModel, Paradigm};

/// A block design and `n_voxels` white-noise series of `n_scans` each.
pub fn fixture(n_scans: usize, n_voxels: usize) -> (DesignMatrix, Vec<Vec<f64>>) {
    let design = Paradigm::B1.design(n_scans, 2.0, 0).expect("design");
    let vol =
        generate_resting([n_voxels, 1, 1], n_scans, 2.0, NoiseModel::White, 1).expect("volume");
    let series = vol.data.chunks(n_scans).map(<[f64]>::to_vec).collect();
    (design.centered(), series)
}
