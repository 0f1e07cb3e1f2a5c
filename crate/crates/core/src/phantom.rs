//! Ellipsoid phantoms in Hounsfield units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{Unit, VoxelVolume};

/// HU value of empty space.
pub const AIR_HU: f32 = -1000.0;

/// Semi-axis used for objects that extend through the whole volume in z.
pub const UNBOUNDED_MM: f64 = 1.0e9;

/// An ellipsoid whose indicator function, scaled by `value`, is added to the
/// background. Positions and lengths are in mm relative to the volume center;
/// `rotation` turns the x/y axes counterclockwise about z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSpec {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    #[serde(default)]
    pub rotation: f64,
    pub value: f64,
}

impl EllipsoidSpec {
    pub fn sphere(center: [f64; 3], radius: f64, value: f64) -> Self {
        Self {
            center,
            semi_axes: [radius; 3],
            rotation: 0.0,
            value,
        }
    }

    /// Elliptic cylinder parallel to z.
    pub fn cylinder(center: [f64; 2], semi_axes: [f64; 2], rotation: f64, value: f64) -> Self {
        Self {
            center: [center[0], center[1], 0.0],
            semi_axes: [semi_axes[0], semi_axes[1], UNBOUNDED_MM],
            rotation,
            value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.semi_axes.iter().all(|&a| a > 0.0 && a.is_finite()) {
            return Err(invalid(format!("semi-axes must be positive, got {:?}", self.semi_axes)));
        }
        if !(self.center.iter().all(|c| c.is_finite()) && self.rotation.is_finite() && self.value.is_finite()) {
            return Err(invalid("ellipsoid parameters must be finite"));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = (c * dx + s * dy) / self.semi_axes[0];
        let v = (-s * dx + c * dy) / self.semi_axes[1];
        let w = (p[2] - self.center[2]) / self.semi_axes[2];
        u * u + v * v + w * w <= 1.0
    }
}

/// Rasterizes `specs` over an air background, sampling each voxel at its center.
pub fn generate_phantom(shape: [usize; 3], spacing: [f64; 3], specs: &[EllipsoidSpec]) -> Result<VoxelVolume> {
    generate_phantom_supersampled(shape, spacing, specs, 1)
}

/// As [`generate_phantom`], averaging `factor³` sub-voxel samples per voxel to
/// approximate partial-volume values at object boundaries.
pub fn generate_phantom_supersampled(
    shape: [usize; 3],
    spacing: [f64; 3],
    specs: &[EllipsoidSpec],
    factor: usize,
) -> Result<VoxelVolume> {
    if specs.is_empty() {
        return Err(invalid("phantom needs at least one ellipsoid"));
    }
    if factor == 0 {
        return Err(invalid("supersampling factor must be at least 1"));
    }
    for s in specs {
        s.validate()?;
    }
    let [nx, ny, nz] = shape;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(invalid(format!("empty phantom shape {shape:?}")));
    }
    let offsets: Vec<f64> = (0..factor).map(|s| (s as f64 + 0.5) / factor as f64 - 0.5).collect();
    let center = |n: usize, idx: usize, d: f64| (idx as f64 - (n as f64 - 1.0) / 2.0) * d;
    let norm = 1.0 / (factor * factor * factor) as f64;
    let mut values = vec![0f32; nx * ny * nz];
    values.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        let zc = center(nz, k, spacing[2]);
        for j in 0..ny {
            let yc = center(ny, j, spacing[1]);
            for i in 0..nx {
                let xc = center(nx, i, spacing[0]);
                let mut acc = 0.0;
                for s in specs {
                    let mut hits = 0usize;
                    for oz in &offsets {
                        for oy in &offsets {
                            for ox in &offsets {
                                let p = [xc + ox * spacing[0], yc + oy * spacing[1], zc + oz * spacing[2]];
                                hits += s.contains(p) as usize;
                            }
                        }
                    }
                    acc += s.value * hits as f64 * norm;
                }
                slice[j * nx + i] = (AIR_HU as f64 + acc) as f32;
            }
        }
    });
    VoxelVolume::new(shape, spacing, Unit::Hu, values)
}

/// A chest-like arrangement filling a field of half-extents `half` (mm):
/// soft-tissue body, two lungs, spine, heart and a few nodules.
pub fn chest_specs(half: [f64; 3]) -> Vec<EllipsoidSpec> {
    let [hx, hy, hz] = half;
    vec![
        // body, soft tissue
        EllipsoidSpec {
            center: [0.0, 0.0, 0.0],
            semi_axes: [0.85 * hx, 0.62 * hy, 1.6 * hz],
            rotation: 0.0,
            value: 1000.0,
        },
        // lungs
        EllipsoidSpec {
            center: [-0.38 * hx, 0.02 * hy, 0.05 * hz],
            semi_axes: [0.3 * hx, 0.45 * hy, 1.1 * hz],
            rotation: 0.12,
            value: -780.0,
        },
        EllipsoidSpec {
            center: [0.38 * hx, 0.02 * hy, 0.05 * hz],
            semi_axes: [0.3 * hx, 0.45 * hy, 1.1 * hz],
            rotation: -0.12,
            value: -780.0,
        },
        // spine
        EllipsoidSpec {
            center: [0.0, -0.48 * hy, 0.0],
            semi_axes: [0.09 * hx, 0.09 * hy, 2.0 * hz],
            rotation: 0.0,
            value: 700.0,
        },
        // heart
        EllipsoidSpec {
            center: [0.1 * hx, 0.12 * hy, -0.2 * hz],
            semi_axes: [0.2 * hx, 0.17 * hy, 0.5 * hz],
            rotation: 0.5,
            value: 40.0,
        },
        // nodules
        EllipsoidSpec::sphere([-0.42 * hx, 0.2 * hy, 0.3 * hz], 0.06 * hx, 760.0),
        EllipsoidSpec::sphere([0.35 * hx, -0.15 * hy, -0.4 * hz], 0.04 * hx, 760.0),
        EllipsoidSpec::sphere([0.45 * hx, 0.25 * hy, 0.1 * hz], 0.03 * hx, 760.0),
    ]
}

/// Chest-like specs with seeded jitter of position, size and orientation,
/// plus one to three additional lung nodules.
pub fn random_specs(half: [f64; 3], seed: u64) -> Vec<EllipsoidSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = chest_specs(half);
    for s in &mut specs {
        for (a, &h) in half.iter().enumerate() {
            s.center[a] += rng.gen_range(-0.03..0.03) * h;
            s.semi_axes[a] *= rng.gen_range(0.92..1.08);
        }
        s.rotation += rng.gen_range(-0.1..0.1);
    }
    let extra = rng.gen_range(1..=3);
    for _ in 0..extra {
        let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let center = [
            side * rng.gen_range(0.25..0.5) * half[0],
            rng.gen_range(-0.3..0.3) * half[1],
            rng.gen_range(-0.7..0.7) * half[2],
        ];
        specs.push(EllipsoidSpec::sphere(
            center,
            rng.gen_range(0.02..0.05) * half[0],
            760.0,
        ));
    }
    specs
}

/// Half-extents of a volume in mm.
pub fn half_extent(shape: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| shape[a] as f64 * spacing[a] / 2.0)
}

/// Specs for a phantom constant along z: every ellipsoid becomes a cylinder
/// with the same in-plane cross-section through its center.
pub fn z_homogeneous(specs: &[EllipsoidSpec]) -> Vec<EllipsoidSpec> {
    specs
        .iter()
        .map(|s| {
            EllipsoidSpec::cylinder(
                [s.center[0], s.center[1]],
                [s.semi_axes[0], s.semi_axes[1]],
                s.rotation,
                s.value,
            )
        })
        .collect()
}
