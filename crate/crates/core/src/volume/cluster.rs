//! Voxel neighborhoods in index space.

use crate::error::{Error, Result};

/// Largest supported squared radius.
pub const MAX_RADIUS: u32 = 4;

/// A voxel and its in-mask neighbors, center first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterIndex {
    pub center: [usize; 3],
    pub neighbors: Vec<[usize; 3]>,
}

impl ClusterIndex {
    pub fn q(&self) -> usize {
        self.neighbors.len()
    }
}

pub fn linear_index(dims: [usize; 3], ijk: [usize; 3]) -> usize {
    ijk[0] + dims[0] * (ijk[1] + dims[1] * ijk[2])
}

pub fn coords(dims: [usize; 3], v: usize) -> [usize; 3] {
    [
        v % dims[0],
        (v / dims[0]) % dims[1],
        v / (dims[0] * dims[1]),
    ]
}

/// Offsets with squared index distance at most `r`, center first, then by
/// distance; ties follow the axis order with `+` before `-`.
pub fn neighborhood_offsets(r: u32) -> Result<Vec<[i64; 3]>> {
    if !(1..=MAX_RADIUS).contains(&r) {
        return Err(Error::Parameter(format!(
            "neighborhood radius {r} is outside 1..={MAX_RADIUS}"
        )));
    }
    let span = 2i64;
    let mut offs = Vec::new();
    for di in -span..=span {
        for dj in -span..=span {
            for dk in -span..=span {
                if di * di + dj * dj + dk * dk <= r as i64 {
                    offs.push([di, dj, dk]);
                }
            }
        }
    }
    let axis_key = |d: i64| (d == 0, d < 0, d.abs());
    offs.sort_by_key(|o| {
        (
            o.iter().map(|d| d * d).sum::<i64>(),
            axis_key(o[0]),
            axis_key(o[1]),
            axis_key(o[2]),
        )
    });
    Ok(offs)
}

/// In-mask voxels within squared index distance `r` of `center`.
pub fn neighborhood(
    center: [usize; 3],
    r: u32,
    mask: &[bool],
    dims: [usize; 3],
) -> Result<ClusterIndex> {
    let offsets = neighborhood_offsets(r)?;
    cluster_from_offsets(center, &offsets, mask, dims)
}

/// [`neighborhood`] with precomputed offsets.
pub fn cluster_from_offsets(
    center: [usize; 3],
    offsets: &[[i64; 3]],
    mask: &[bool],
    dims: [usize; 3],
) -> Result<ClusterIndex> {
    if mask.len() != dims.iter().product::<usize>() {
        return Err(Error::Parameter(format!(
            "mask length {} does not match extent {dims:?}",
            mask.len()
        )));
    }
    if (0..3).any(|a| center[a] >= dims[a]) || !mask[linear_index(dims, center)] {
        return Err(Error::Parameter(format!(
            "cluster center {center:?} is outside the mask"
        )));
    }
    let mut neighbors = Vec::with_capacity(offsets.len());
    for o in offsets {
        let mut ijk = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let c = center[a] as i64 + o[a];
            if c < 0 || c >= dims[a] as i64 {
                inside = false;
                break;
            }
            ijk[a] = c as usize;
        }
        if inside && mask[linear_index(dims, ijk)] {
            neighbors.push(ijk);
        }
    }
    Ok(ClusterIndex { center, neighbors })
}
