#![allow(dead_code)]

use sparsect::phantom::{chest_specs, generate_phantom_supersampled, half_extent, z_homogeneous, EllipsoidSpec};
use sparsect::sim::hu_to_attenuation;
use sparsect::{Image, VoxelVolume};

/// Centered disk of attenuation 1 and radius `r` mm on an `n x n` grid of
/// `pitch` mm, with 8x supersampled partial-volume edges.
pub fn disk_slice(n: usize, pitch: f64, r: f64) -> Image {
    let spec = EllipsoidSpec::cylinder([0.0, 0.0], [r, r], 0.0, 1000.0);
    let hu = generate_phantom_supersampled([n, n, 1], [pitch; 3], &[spec], 8).unwrap();
    hu_to_attenuation(&hu).unwrap().slice(0)
}

/// Chest-like phantom constant along z, in HU.
pub fn chest_volume(shape: [usize; 3], spacing: [f64; 3], supersample: usize) -> VoxelVolume {
    let specs = z_homogeneous(&chest_specs(half_extent(shape, spacing)));
    generate_phantom_supersampled(shape, spacing, &specs, supersample).unwrap()
}

/// Pixels whose `(2k+1)^2` neighbourhood in `reference` is constant.
pub fn flat_mask(reference: &[f32], nx: usize, ny: usize, k: usize) -> Vec<bool> {
    let mut mask = vec![false; nx * ny];
    for j in k..ny.saturating_sub(k) {
        for i in k..nx.saturating_sub(k) {
            let c = reference[j * nx + i];
            mask[j * nx + i] = (j - k..=j + k).all(|jj| (i - k..=i + k).all(|ii| reference[jj * nx + ii] == c));
        }
    }
    mask
}

/// RMSE of `a - b` over the mask relative to the RMS of `b` over the mask.
pub fn rel_rmse(a: &[f32], b: &[f32], mask: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((&x, &y), &m) in a.iter().zip(b).zip(mask) {
        if m {
            num += (x as f64 - y as f64).powi(2);
            den += (y as f64).powi(2);
        }
    }
    (num / den).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
