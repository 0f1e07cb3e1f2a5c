//! Ray-driven forward projection with linear (2D) or bilinear (3D)
//! interpolation, and the exact transpose of the same operator.
//!
//! Each ray is walked along whichever grid axis it crosses fastest. At every
//! plane of that axis the image is interpolated between the two (or four)
//! nearest voxel centers, and the sample is weighted by the path length between
//! planes. The adjoint scatters the same weights, so `<Ax, y> = <x, A^T y>` holds
//! up to rounding of the accumulation.

use rayon::prelude::*;

use crate::error::{ensure_shape, invalid, Error, Result};
use crate::types::{ensure_unit, BeamGeometry, BeamKind, Image, Sinogram, Unit, VoxelVolume};

/// Storage type accepted by the projection operators. Accumulation is always
/// carried out in `f64`.
pub trait Sample: Copy + Send + Sync + Default + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Sample for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Sample for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy)]
struct Grid2 {
    n: [usize; 2],
    s: [f64; 2],
}

#[derive(Debug, Clone, Copy)]
struct Grid3 {
    n: [usize; 3],
    s: [f64; 3],
}

/// Index range `[lo, hi]` of `i in 0..n` for which `f0 + slope * i` lies in `(-1, m)`.
#[inline]
fn clip_range(f0: f64, slope: f64, n: usize, m: usize) -> Option<(usize, usize)> {
    let (lo, hi) = if slope.abs() < 1e-12 {
        if f0 > -1.0 && f0 < m as f64 {
            (0.0, (n - 1) as f64)
        } else {
            return None;
        }
    } else {
        let a = (-1.0 - f0) / slope;
        let b = (m as f64 - f0) / slope;
        (a.min(b).floor(), a.max(b).ceil())
    };
    let lo = lo.max(0.0);
    let hi = hi.min((n - 1) as f64);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

/// Walks the ray `o + t d` through a 2D grid, calling `visit(index, weight)`.
#[inline]
fn walk_2d(grid: Grid2, o: [f64; 2], d: [f64; 2], mut visit: impl FnMut(usize, f64)) {
    let major = if d[0].abs() / grid.s[0] >= d[1].abs() / grid.s[1] {
        0
    } else {
        1
    };
    let minor = 1 - major;
    if d[major] == 0.0 {
        return;
    }
    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let len = grid.s[major] * norm / d[major].abs();
    let c = [(grid.n[0] as f64 - 1.0) * 0.5, (grid.n[1] as f64 - 1.0) * 0.5];
    // minor fractional index as a linear function of the major index
    let ratio = d[minor] / d[major];
    let x0 = -c[major] * grid.s[major];
    let f0 = (o[minor] + (x0 - o[major]) * ratio) / grid.s[minor] + c[minor];
    let slope = ratio * grid.s[major] / grid.s[minor];
    let stride = [1, grid.n[0]];
    let m = grid.n[minor] as isize;
    let Some((lo, hi)) = clip_range(f0, slope, grid.n[major], grid.n[minor]) else {
        return;
    };
    for i in lo..=hi {
        let f = f0 + slope * i as f64;
        let fl = f.floor();
        let w = f - fl;
        let j = fl as isize;
        let base = i * stride[major];
        if j >= 0 && j < m {
            visit(base + j as usize * stride[minor], (1.0 - w) * len);
        }
        if j + 1 >= 0 && j + 1 < m {
            visit(base + (j + 1) as usize * stride[minor], w * len);
        }
    }
}

/// Walks the ray `o + t d` through a 3D grid with bilinear interpolation on the
/// planes orthogonal to the dominant axis.
#[inline]
fn walk_3d(grid: Grid3, o: [f64; 3], d: [f64; 3], mut visit: impl FnMut(usize, f64)) {
    let a = [d[0].abs() / grid.s[0], d[1].abs() / grid.s[1], d[2].abs() / grid.s[2]];
    let major = if a[0] >= a[1] && a[0] >= a[2] {
        0
    } else if a[1] >= a[2] {
        1
    } else {
        2
    };
    let (p, q) = match major {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    if d[major] == 0.0 {
        return;
    }
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let len = grid.s[major] * norm / d[major].abs();
    let c = [
        (grid.n[0] as f64 - 1.0) * 0.5,
        (grid.n[1] as f64 - 1.0) * 0.5,
        (grid.n[2] as f64 - 1.0) * 0.5,
    ];
    let x0 = -c[major] * grid.s[major];
    let line = |axis: usize| {
        let ratio = d[axis] / d[major];
        let f0 = (o[axis] + (x0 - o[major]) * ratio) / grid.s[axis] + c[axis];
        (f0, ratio * grid.s[major] / grid.s[axis])
    };
    let (fp0, sp) = line(p);
    let (fq0, sq) = line(q);
    let Some((lo_p, hi_p)) = clip_range(fp0, sp, grid.n[major], grid.n[p]) else {
        return;
    };
    let Some((lo_q, hi_q)) = clip_range(fq0, sq, grid.n[major], grid.n[q]) else {
        return;
    };
    let lo = lo_p.max(lo_q);
    let hi = hi_p.min(hi_q);
    let stride = [1, grid.n[0], grid.n[0] * grid.n[1]];
    let (mp, mq) = (grid.n[p] as isize, grid.n[q] as isize);
    for i in lo..=hi {
        let fp = fp0 + sp * i as f64;
        let fq = fq0 + sq * i as f64;
        let (flp, flq) = (fp.floor(), fq.floor());
        let (wp, wq) = (fp - flp, fq - flq);
        let (jp, jq) = (flp as isize, flq as isize);
        let base = i * stride[major];
        for (dp, fw_p) in [(0isize, 1.0 - wp), (1, wp)] {
            let kp = jp + dp;
            if kp < 0 || kp >= mp {
                continue;
            }
            for (dq, fw_q) in [(0isize, 1.0 - wq), (1, wq)] {
                let kq = jq + dq;
                if kq < 0 || kq >= mq {
                    continue;
                }
                visit(
                    base + kp as usize * stride[p] + kq as usize * stride[q],
                    fw_p * fw_q * len,
                );
            }
        }
    }
}

/// Ray `(origin, direction)` for detector column `col` (and row `row` for cone).
#[inline]
fn ray(geometry: &BeamGeometry, angle: f64, row: usize, col: usize) -> ([f64; 3], [f64; 3]) {
    let (sin, cos) = angle.sin_cos();
    let u = (col as f64 - (geometry.det_count as f64 - 1.0) * 0.5) * geometry.det_spacing;
    match geometry.kind {
        BeamKind::Parallel => ([u * cos, u * sin, 0.0], [-sin, cos, 0.0]),
        BeamKind::Fan | BeamKind::Cone => {
            let v = (row as f64 - (geometry.det_rows as f64 - 1.0) * 0.5) * geometry.det_row_spacing;
            let src = [geometry.sod * cos, geometry.sod * sin, 0.0];
            let back = geometry.sdd - geometry.sod;
            let det = [-back * cos - u * sin, -back * sin + u * cos, v];
            (src, [det[0] - src[0], det[1] - src[1], det[2] - src[2]])
        }
    }
}

/// Linear operator mapping an `nx * ny` image to a parallel- or fan-beam
/// sinogram (`views * det_count`).
#[derive(Debug, Clone)]
pub struct SliceProjector {
    grid: Grid2,
    geometry: BeamGeometry,
    angles: Vec<f64>,
}

impl SliceProjector {
    pub fn new(shape: [usize; 2], spacing: [f64; 2], geometry: BeamGeometry, angles: &[f64]) -> Result<Self> {
        geometry.validate()?;
        if geometry.kind == BeamKind::Cone {
            return Err(invalid("slice projection supports parallel and fan beams only"));
        }
        if shape[0] == 0 || shape[1] == 0 {
            return Err(invalid("empty image"));
        }
        Ok(Self {
            grid: Grid2 { n: shape, s: spacing },
            geometry,
            angles: angles.to_vec(),
        })
    }

    pub fn image_len(&self) -> usize {
        self.grid.n[0] * self.grid.n[1]
    }

    pub fn sinogram_len(&self) -> usize {
        self.angles.len() * self.geometry.det_count
    }

    pub fn forward<T: Sample>(&self, image: &[T]) -> Vec<T> {
        assert_eq!(image.len(), self.image_len());
        let n_det = self.geometry.det_count;
        let mut out = vec![T::default(); self.sinogram_len()];
        out.par_chunks_mut(n_det)
            .zip(self.angles.par_iter())
            .for_each(|(row, &angle)| {
                for (col, o) in row.iter_mut().enumerate() {
                    let (p, d) = ray(&self.geometry, angle, 0, col);
                    let mut acc = 0.0;
                    walk_2d(self.grid, [p[0], p[1]], [d[0], d[1]], |idx, w| {
                        acc += w * image[idx].to_f64();
                    });
                    *o = T::from_f64(acc);
                }
            });
        out
    }

    pub fn adjoint<T: Sample>(&self, sino: &[T]) -> Vec<T> {
        assert_eq!(sino.len(), self.sinogram_len());
        let n_det = self.geometry.det_count;
        let n = self.image_len();
        let acc = sino
            .par_chunks(n_det)
            .zip(self.angles.par_iter())
            .fold(
                || vec![0.0f64; n],
                |mut acc, (row, &angle)| {
                    for (col, &val) in row.iter().enumerate() {
                        let val = val.to_f64();
                        if val == 0.0 {
                            continue;
                        }
                        let (p, d) = ray(&self.geometry, angle, 0, col);
                        walk_2d(self.grid, [p[0], p[1]], [d[0], d[1]], |idx, w| {
                            acc[idx] += w * val;
                        });
                    }
                    acc
                },
            )
            .reduce(|| vec![0.0f64; n], add_into);
        acc.into_iter().map(T::from_f64).collect()
    }
}

/// Linear operator mapping an `nx * ny * nz` volume to a cone-beam sinogram
/// (`views * det_rows * det_count`).
#[derive(Debug, Clone)]
pub struct ConeProjector {
    grid: Grid3,
    geometry: BeamGeometry,
    angles: Vec<f64>,
}

impl ConeProjector {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], geometry: BeamGeometry, angles: &[f64]) -> Result<Self> {
        geometry.validate()?;
        if geometry.kind != BeamKind::Cone {
            return Err(invalid("volumetric projection requires a cone-beam geometry"));
        }
        if shape.contains(&0) {
            return Err(invalid("empty volume"));
        }
        Ok(Self {
            grid: Grid3 { n: shape, s: spacing },
            geometry,
            angles: angles.to_vec(),
        })
    }

    pub fn volume_len(&self) -> usize {
        self.grid.n.iter().product()
    }

    pub fn sinogram_len(&self) -> usize {
        self.angles.len() * self.geometry.det_rows * self.geometry.det_count
    }

    pub fn forward<T: Sample>(&self, volume: &[T]) -> Vec<T> {
        assert_eq!(volume.len(), self.volume_len());
        let g = &self.geometry;
        let per_view = g.det_rows * g.det_count;
        let mut out = vec![T::default(); self.sinogram_len()];
        out.par_chunks_mut(g.det_count).enumerate().for_each(|(line, row_out)| {
            let view = line / g.det_rows;
            let row = line % g.det_rows;
            let angle = self.angles[view];
            for (col, o) in row_out.iter_mut().enumerate() {
                let (p, d) = ray(g, angle, row, col);
                let mut acc = 0.0;
                walk_3d(self.grid, p, d, |idx, w| acc += w * volume[idx].to_f64());
                *o = T::from_f64(acc);
            }
        });
        debug_assert_eq!(out.len(), per_view * self.angles.len());
        out
    }

    pub fn adjoint<T: Sample>(&self, sino: &[T]) -> Vec<T> {
        assert_eq!(sino.len(), self.sinogram_len());
        let g = &self.geometry;
        let n = self.volume_len();
        let acc = sino
            .par_chunks(g.det_count)
            .enumerate()
            .fold(
                || vec![0.0f64; n],
                |mut acc, (line, row_in)| {
                    let angle = self.angles[line / g.det_rows];
                    let row = line % g.det_rows;
                    for (col, &val) in row_in.iter().enumerate() {
                        let val = val.to_f64();
                        if val == 0.0 {
                            continue;
                        }
                        let (p, d) = ray(g, angle, row, col);
                        walk_3d(self.grid, p, d, |idx, w| acc[idx] += w * val);
                    }
                    acc
                },
            )
            .reduce(|| vec![0.0f64; n], add_into);
        acc.into_iter().map(T::from_f64).collect()
    }
}

fn add_into(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
    a
}

/// Largest distance from the rotation axis reached by any nonzero pixel,
/// including the pixel's own half-diagonal.
fn support_radius(values: &[f32], nx: usize, ny: usize, sx: f64, sy: f64) -> f64 {
    let cx = (nx as f64 - 1.0) * 0.5;
    let cy = (ny as f64 - 1.0) * 0.5;
    let half = 0.5 * (sx * sx + sy * sy).sqrt();
    let mut r2max: f64 = -1.0;
    for (idx, &v) in values.iter().enumerate() {
        if v != 0.0 {
            let x = (((idx % nx) as f64) - cx) * sx;
            let y = ((((idx / nx) % ny) as f64) - cy) * sy;
            r2max = r2max.max(x * x + y * y);
        }
    }
    if r2max < 0.0 {
        0.0
    } else {
        r2max.sqrt() + half
    }
}

fn check_fov(geometry: &BeamGeometry, radius: f64) -> Result<()> {
    let fov = geometry.fov_radius();
    if radius > fov + 1e-9 {
        return Err(Error::Geometry(format!(
            "object extends to {radius:.2} mm but the field of view radius is {fov:.2} mm"
        )));
    }
    Ok(())
}

/// Projects one attenuation slice with a parallel or fan beam. Values are line
/// integrals in (attenuation x mm).
pub fn forward_project_slice(slice: &Image, geometry: &BeamGeometry, angles: &[f64]) -> Result<Sinogram> {
    ensure_unit(Unit::Attenuation, slice.unit)?;
    if slice.nx != slice.ny {
        return Err(invalid(format!("slice must be square, got {}x{}", slice.nx, slice.ny)));
    }
    let proj = SliceProjector::new([slice.nx, slice.ny], slice.spacing, *geometry, angles)?;
    check_fov(
        geometry,
        support_radius(&slice.values, slice.nx, slice.ny, slice.spacing[0], slice.spacing[1]),
    )?;
    Sinogram::new(angles.to_vec(), proj.forward(&slice.values), *geometry)
}

/// Projects an attenuation volume with a cone beam. The result is laid out
/// `[view][row][col]`.
pub fn forward_project_cone(volume: &VoxelVolume, geometry: &BeamGeometry, angles: &[f64]) -> Result<Sinogram> {
    ensure_unit(Unit::Attenuation, volume.unit())?;
    let [nx, ny, nz] = volume.shape();
    let sp = volume.spacing();
    let proj = ConeProjector::new(volume.shape(), sp, *geometry, angles)?;
    let per_slice = nx * ny;
    let radius = (0..nz)
        .map(|k| {
            support_radius(
                &volume.values()[k * per_slice..(k + 1) * per_slice],
                nx,
                ny,
                sp[0],
                sp[1],
            )
        })
        .fold(0.0, f64::max);
    check_fov(geometry, radius)?;
    Sinogram::new(angles.to_vec(), proj.forward(volume.values()), *geometry)
}

/// Exact transpose of the forward projector. For parallel and fan sinograms
/// `shape[2]` must be 1.
pub fn backproject(sino: &Sinogram, shape: [usize; 3], spacing: [f64; 3]) -> Result<VoxelVolume> {
    let g = sino.geometry();
    let values = match g.kind {
        BeamKind::Parallel | BeamKind::Fan => {
            if shape[2] != 1 {
                return Err(Error::ShapeMismatch {
                    expected: vec![shape[0], shape[1], 1],
                    found: shape.to_vec(),
                });
            }
            SliceProjector::new([shape[0], shape[1]], [spacing[0], spacing[1]], *g, sino.angles())?
                .adjoint(sino.values())
        }
        BeamKind::Cone => {
            let proj = ConeProjector::new(shape, spacing, *g, sino.angles())?;
            ensure_shape(&[proj.sinogram_len()], &[sino.values().len()])?;
            proj.adjoint(sino.values())
        }
    };
    VoxelVolume::new(shape, spacing, Unit::Attenuation, values)
}
