//! Analytic reconstruction: ramp-filtered backprojection for parallel and fan
//! beams, and Feldkamp-Davis-Kress for cone beams.
//!
//! Filtering uses the band-limited Ram-Lak kernel sampled in the spatial domain
//! (`h[0] = 1/(4 ds^2)`, `h[n odd] = -1/(pi n ds)^2`, zero otherwise), moved to the
//! frequency domain on a zero-padded row so that the product is an exact linear
//! convolution over the detector.
//!
//! Backprojection for reconstruction is voxel driven: each voxel center is
//! projected onto the detector and the filtered data are interpolated there.
//! This is not the transpose of the ray-driven projector (see
//! [`crate::projector::backproject`] for that); it is the standard discretisation
//! of the inversion formula and avoids the aliasing of ray-driven scatter.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{BeamKind, Image, Sinogram, Unit, VoxelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    #[default]
    RamLak,
    /// Ram-Lak multiplied by a Hann window reaching zero at Nyquist.
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Rows are zero-padded to the next power of two of `padding * det_count`.
    pub padding: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            kind: FilterKind::RamLak,
            padding: 2,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.padding < 2 || !self.padding.is_power_of_two() {
            return Err(invalid(format!(
                "padding factor must be a power of two >= 2, got {}",
                self.padding
            )));
        }
        Ok(())
    }
}

/// A ramp filter prepared for rows of a fixed length and sample spacing.
pub struct RampFilter {
    len: usize,
    padded: usize,
    response: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(len: usize, spacing: f64, spec: FilterSpec) -> Result<Self> {
        spec.validate()?;
        if len == 0 || spacing.is_nan() || spacing <= 0.0 {
            return Err(invalid("ramp filter needs a nonempty row and positive spacing"));
        }
        let padded = (spec.padding * len).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);

        let mut kernel: Vec<Complex<f64>> = (0..padded)
            .map(|k| {
                let n = if k <= padded / 2 {
                    k as i64
                } else {
                    k as i64 - padded as i64
                };
                Complex::new(ram_lak_tap(n, spacing), 0.0)
            })
            .collect();
        fft.process(&mut kernel);
        let response = kernel
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let window = match spec.kind {
                    FilterKind::RamLak => 1.0,
                    FilterKind::Hann => 0.5 + 0.5 * (2.0 * PI * k as f64 / padded as f64).cos(),
                };
                c.re * window / padded as f64
            })
            .collect();
        Ok(Self {
            len,
            padded,
            response,
            fft,
            ifft,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.padded
    }

    /// Real frequency response, DC first, including the `1/padded` inverse-FFT scale.
    pub fn response(&self) -> &[f64] {
        &self.response
    }

    /// Filters one row, returning the full zero-padded circular output.
    pub fn apply_padded(&self, row: &[f64]) -> Vec<f64> {
        assert_eq!(row.len(), self.len);
        let mut buf: Vec<Complex<f64>> = row
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.padded)
            .collect();
        self.fft.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.ifft.process(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        let mut out = self.apply_padded(row);
        out.truncate(self.len);
        out
    }
}

/// Spatial Ram-Lak tap at integer offset `n` for sample spacing `ds`.
pub fn ram_lak_tap(n: i64, ds: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * ds * ds)
    } else if n % 2 == 0 {
        0.0
    } else {
        let d = PI * n as f64 * ds;
        -1.0 / (d * d)
    }
}

fn filter_rows(rows: &[f32], row_len: usize, filter: &RampFilter, weight: impl Fn(usize) -> f64 + Sync) -> Vec<f64> {
    let mut out = vec![0.0f64; rows.len()];
    out.par_chunks_mut(row_len)
        .zip(rows.par_chunks(row_len))
        .enumerate()
        .for_each(|(r, (dst, src))| {
            let base = r * row_len;
            let input: Vec<f64> = src
                .iter()
                .enumerate()
                .map(|(c, &v)| v as f64 * weight(base + c))
                .collect();
            dst.copy_from_slice(&filter.apply(&input));
        });
    out
}

/// Ramp-filters every detector row of the sinogram along the column axis,
/// using the physical detector spacing.
pub fn ramp_filter(sino: &Sinogram, spec: FilterSpec) -> Result<Sinogram> {
    let g = sino.geometry();
    let filter = RampFilter::new(g.det_count, g.det_spacing, spec)?;
    let out = filter_rows(sino.values(), g.det_count, &filter, |_| 1.0);
    Sinogram::new(sino.angles().to_vec(), out.into_iter().map(|v| v as f32).collect(), *g)
}

fn expect_kind(sino: &Sinogram, kind: BeamKind) -> Result<()> {
    if sino.geometry().kind != kind {
        return Err(invalid(format!(
            "expected a {kind} sinogram, got {}",
            sino.geometry().kind
        )));
    }
    Ok(())
}

#[inline]
fn lerp_row(row: &[f64], f: f64) -> f64 {
    let fl = f.floor();
    let i = fl as isize;
    let w = f - fl;
    let n = row.len() as isize;
    let mut v = 0.0;
    if i >= 0 && i < n {
        v += (1.0 - w) * row[i as usize];
    }
    if i + 1 >= 0 && i + 1 < n {
        v += w * row[(i + 1) as usize];
    }
    v
}

/// Parallel-beam FBP onto an `out_shape = [nx, ny]` grid with the given pixel spacing.
/// The output is in the attenuation units of the projected object.
pub fn fbp_parallel(sino: &Sinogram, out_shape: [usize; 2], spacing: [f64; 2], filter: FilterSpec) -> Result<Image> {
    expect_kind(sino, BeamKind::Parallel)?;
    let g = *sino.geometry();
    let n_det = g.det_count;
    let ramp = RampFilter::new(n_det, g.det_spacing, filter)?;
    let q = filter_rows(sino.values(), n_det, &ramp, |_| 1.0);
    let trig: Vec<(f64, f64)> = sino.angles().iter().map(|a| a.sin_cos()).collect();
    let [nx, ny] = out_shape;
    let (cx, cy) = ((nx as f64 - 1.0) * 0.5, (ny as f64 - 1.0) * 0.5);
    let cdet = (n_det as f64 - 1.0) * 0.5;
    let scale = g.angular_range / sino.n_views() as f64 * g.det_spacing;
    let mut out = vec![0.0f32; nx * ny];
    out.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
        let y = (j as f64 - cy) * spacing[1];
        for (i, o) in row.iter_mut().enumerate() {
            let x = (i as f64 - cx) * spacing[0];
            let mut acc = 0.0;
            for (v, &(sin, cos)) in trig.iter().enumerate() {
                let s = x * cos + y * sin;
                acc += lerp_row(&q[v * n_det..(v + 1) * n_det], s / g.det_spacing + cdet);
            }
            *o = (acc * scale) as f32;
        }
    });
    Image::new(nx, ny, spacing, Unit::Attenuation, out)
}

/// Fan-beam FBP for a flat detector over a full turn: cosine pre-weighting,
/// ramp filtering on the detector rescaled to the rotation axis, and `1/U^2`
/// distance-weighted backprojection.
pub fn fbp_fan(sino: &Sinogram, out_shape: [usize; 2], spacing: [f64; 2], filter: FilterSpec) -> Result<Image> {
    expect_kind(sino, BeamKind::Fan)?;
    let g = *sino.geometry();
    let n_det = g.det_count;
    let da = g.virtual_spacing();
    let cdet = (n_det as f64 - 1.0) * 0.5;
    let sod = g.sod;
    let ramp = RampFilter::new(n_det, da, filter)?;
    let q = filter_rows(sino.values(), n_det, &ramp, |idx| {
        let a = ((idx % n_det) as f64 - cdet) * da;
        sod / (sod * sod + a * a).sqrt()
    });
    let trig: Vec<(f64, f64)> = sino.angles().iter().map(|a| a.sin_cos()).collect();
    let [nx, ny] = out_shape;
    let (cx, cy) = ((nx as f64 - 1.0) * 0.5, (ny as f64 - 1.0) * 0.5);
    let scale = 0.5 * g.angular_range / sino.n_views() as f64 * da;
    let mut out = vec![0.0f32; nx * ny];
    out.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
        let y = (j as f64 - cy) * spacing[1];
        for (i, o) in row.iter_mut().enumerate() {
            let x = (i as f64 - cx) * spacing[0];
            let mut acc = 0.0;
            for (v, &(sin, cos)) in trig.iter().enumerate() {
                let u_scale = (sod - (x * cos + y * sin)) / sod;
                let a = (-x * sin + y * cos) / u_scale;
                acc += lerp_row(&q[v * n_det..(v + 1) * n_det], a / da + cdet) / (u_scale * u_scale);
            }
            *o = (acc * scale) as f32;
        }
    });
    Image::new(nx, ny, spacing, Unit::Attenuation, out)
}

/// FDK reconstruction for a flat-panel circular cone-beam scan.
pub fn fdk_cone(sino: &Sinogram, out_shape: [usize; 3], spacing: [f64; 3], filter: FilterSpec) -> Result<VoxelVolume> {
    expect_kind(sino, BeamKind::Cone)?;
    let g = *sino.geometry();
    let (n_det, n_rows) = (g.det_count, g.det_rows);
    let mag = g.magnification();
    let da = g.det_spacing / mag;
    let db = g.det_row_spacing / mag;
    let cdet = (n_det as f64 - 1.0) * 0.5;
    let crow = (n_rows as f64 - 1.0) * 0.5;
    let sod = g.sod;
    let ramp = RampFilter::new(n_det, da, filter)?;
    let q = filter_rows(sino.values(), n_det, &ramp, |idx| {
        let a = ((idx % n_det) as f64 - cdet) * da;
        let b = (((idx / n_det) % n_rows) as f64 - crow) * db;
        sod / (sod * sod + a * a + b * b).sqrt()
    });
    let per_view = n_det * n_rows;
    let trig: Vec<(f64, f64)> = sino.angles().iter().map(|a| a.sin_cos()).collect();
    let [nx, ny, nz] = out_shape;
    let c = [
        (nx as f64 - 1.0) * 0.5,
        (ny as f64 - 1.0) * 0.5,
        (nz as f64 - 1.0) * 0.5,
    ];
    let scale = 0.5 * g.angular_range / sino.n_views() as f64 * da;
    let mut out = vec![0.0f32; nx * ny * nz];
    out.par_chunks_mut(nx).enumerate().for_each(|(line, row)| {
        let j = line % ny;
        let k = line / ny;
        let y = (j as f64 - c[1]) * spacing[1];
        let z = (k as f64 - c[2]) * spacing[2];
        for (i, o) in row.iter_mut().enumerate() {
            let x = (i as f64 - c[0]) * spacing[0];
            let mut acc = 0.0;
            for (v, &(sin, cos)) in trig.iter().enumerate() {
                let u_scale = (sod - (x * cos + y * sin)) / sod;
                let fa = (-x * sin + y * cos) / u_scale / da + cdet;
                let fb = z / u_scale / db + crow;
                let view = &q[v * per_view..(v + 1) * per_view];
                acc += bilerp(view, n_det, n_rows, fa, fb) / (u_scale * u_scale);
            }
            *o = (acc * scale) as f32;
        }
    });
    VoxelVolume::new(out_shape, spacing, Unit::Attenuation, out)
}

#[inline]
fn bilerp(view: &[f64], n_det: usize, n_rows: usize, fa: f64, fb: f64) -> f64 {
    let (fla, flb) = (fa.floor(), fb.floor());
    let (wa, wb) = (fa - fla, fb - flb);
    let (ia, ib) = (fla as isize, flb as isize);
    let mut v = 0.0;
    for (db, w_b) in [(0isize, 1.0 - wb), (1, wb)] {
        let r = ib + db;
        if r < 0 || r >= n_rows as isize {
            continue;
        }
        let row = &view[r as usize * n_det..(r as usize + 1) * n_det];
        for (dc, w_a) in [(0isize, 1.0 - wa), (1, wa)] {
            let col = ia + dc;
            if col >= 0 && col < n_det as isize {
                v += w_a * w_b * row[col as usize];
            }
        }
    }
    v
}
