//! MSE and SSIM scoring.
//!
//! SSIM follows the scikit-image defaults: uniform 7x7 window, sample
//! covariance (`N/(N-1)` normalisation), `K1 = 0.01`, `K2 = 0.03`, a fixed data
//! range, and the mean of the local index over window positions lying fully
//! inside the image. Volumes are scored per axial slice, and slice scores are
//! averaged before any averaging across subjects.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, invalid, Result};
use crate::sim::{apply_correction, clip_corrected, CaseBundle};
use crate::types::{BeamKind, VoxelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.window.is_multiple_of(2) {
            return Err(invalid(format!("SSIM window must be odd and > 1, got {}", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.data_range > 0.0) {
            return Err(invalid("SSIM constants and data range must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Mean of squared differences.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    ensure_shape(&[a.len()], &[b.len()])?;
    if a.is_empty() {
        return Err(invalid("mse of empty arrays"));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Summed-area table with a zero first row and column.
struct Integral {
    w: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Self {
        let stride = w + 1;
        let mut data = vec![0.0; (h + 1) * stride];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += f(r * w + c);
                data[(r + 1) * stride + c + 1] = data[r * stride + c + 1] + row;
            }
        }
        Self { w, data }
    }

    #[inline]
    fn window(&self, r: usize, c: usize, n: usize) -> f64 {
        let s = self.w + 1;
        self.data[(r + n) * s + c + n] - self.data[r * s + c + n] - self.data[(r + n) * s + c] + self.data[r * s + c]
    }
}

/// SSIM of two single-channel `h x w` images (row-major).
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    ensure_shape(&[h * w], &[a.len()])?;
    ensure_shape(&[h * w], &[b.len()])?;
    let n = p.window;
    if h < n || w < n {
        return Err(invalid(format!("image {h}x{w} smaller than the {n}x{n} SSIM window")));
    }
    let x = |i: usize| a[i] as f64;
    let y = |i: usize| b[i] as f64;
    let sx = Integral::new(h, w, x);
    let sy = Integral::new(h, w, y);
    let sxx = Integral::new(h, w, |i| x(i) * x(i));
    let syy = Integral::new(h, w, |i| y(i) * y(i));
    let sxy = Integral::new(h, w, |i| x(i) * y(i));
    let np = (n * n) as f64;
    let cov_norm = np / (np - 1.0);
    let (c1, c2) = (p.c1(), p.c2());
    let mut total = 0.0;
    for r in 0..=h - n {
        for c in 0..=w - n {
            let ux = sx.window(r, c, n) / np;
            let uy = sy.window(r, c, n) / np;
            let vx = cov_norm * (sxx.window(r, c, n) / np - ux * ux);
            let vy = cov_norm * (syy.window(r, c, n) / np - uy * uy);
            let vxy = cov_norm * (sxy.window(r, c, n) / np - ux * uy);
            total += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - n + 1) * (w - n + 1)) as f64)
}

/// SSIM of channels-last `h x w x ch` images, averaged over channels.
pub fn ssim_multichannel(a: &[f32], b: &[f32], h: usize, w: usize, ch: usize, p: &SsimParams) -> Result<f64> {
    ensure_shape(&[h * w * ch], &[a.len()])?;
    ensure_shape(&[h * w * ch], &[b.len()])?;
    let plane = |img: &[f32], k: usize| -> Vec<f32> { img.iter().skip(k).step_by(ch).copied().collect() };
    let mut total = 0.0;
    for k in 0..ch {
        total += ssim(&plane(a, k), &plane(b, k), h, w, p)?;
    }
    Ok(total / ch as f64)
}

/// Slice-averaged MSE and SSIM of `test` against `reference`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub mse: f64,
    pub ssim: f64,
}

pub fn score_volume(reference: &VoxelVolume, test: &VoxelVolume, p: &SsimParams) -> Result<Score> {
    ensure_shape(&reference.shape(), &test.shape())?;
    let [nx, ny, nz] = reference.shape();
    let per: Vec<(f64, f64)> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let r = reference.slice_values(k);
            let t = test.slice_values(k);
            Ok((mse(r, t)?, ssim(r, t, ny, nx, p)?))
        })
        .collect::<Result<_>>()?;
    Ok(Score {
        mse: per.iter().map(|s| s.0).sum::<f64>() / nz as f64,
        ssim: per.iter().map(|s| s.1).sum::<f64>() / nz as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub geometry: BeamKind,
    pub views: usize,
    pub sparse: Score,
    pub corrected: Score,
}

/// Per-view scores of sparse and corrected data, laid out like the
/// supplementary result tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// Column label for the corrected data (e.g. the input dimensionality).
    pub method: String,
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    /// Averages tables (one per subject) row by row.
    pub fn mean(tables: &[MetricsTable]) -> Result<MetricsTable> {
        let first = tables.first().ok_or_else(|| invalid("no tables to average"))?;
        let mut acc: BTreeMap<(BeamKind, usize), (Score, Score, usize)> = BTreeMap::new();
        for t in tables {
            for r in &t.rows {
                let e = acc.entry((r.geometry, r.views)).or_insert((
                    Score { mse: 0.0, ssim: 0.0 },
                    Score { mse: 0.0, ssim: 0.0 },
                    0,
                ));
                e.0.mse += r.sparse.mse;
                e.0.ssim += r.sparse.ssim;
                e.1.mse += r.corrected.mse;
                e.1.ssim += r.corrected.ssim;
                e.2 += 1;
            }
        }
        let rows = acc
            .into_iter()
            .map(|((geometry, views), (s, c, n))| {
                let n = n as f64;
                MetricRow {
                    geometry,
                    views,
                    sparse: Score {
                        mse: s.mse / n,
                        ssim: s.ssim / n,
                    },
                    corrected: Score {
                        mse: c.mse / n,
                        ssim: c.ssim / n,
                    },
                }
            })
            .collect();
        Ok(MetricsTable {
            method: first.method.clone(),
            rows,
        })
    }

    pub fn row(&self, geometry: BeamKind, views: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.geometry == geometry && r.views == views)
    }

    /// Tab-separated table: an MSE block then an SSIM block, one row per view
    /// count, and a `sparse` / method column pair per geometry.
    pub fn to_tsv(&self) -> String {
        let mut geoms: Vec<BeamKind> = self.rows.iter().map(|r| r.geometry).collect();
        geoms.sort();
        geoms.dedup();
        let mut views: Vec<usize> = self.rows.iter().map(|r| r.views).collect();
        views.sort();
        views.dedup();
        let mut out = String::from("metric\tviews");
        for g in &geoms {
            let _ = write!(out, "\t{g}:sparse\t{g}:{}", self.method);
        }
        out.push('\n');
        for (name, pick) in [("MSE", 0), ("SSIM", 1)] {
            for &v in &views {
                let _ = write!(out, "{name}\t{v}");
                for &g in &geoms {
                    match self.row(g, v) {
                        Some(r) => {
                            let (s, c) = if pick == 0 {
                                (r.sparse.mse, r.corrected.mse)
                            } else {
                                (r.sparse.ssim, r.corrected.ssim)
                            };
                            let _ = write!(out, "\t{s:.6e}\t{c:.6e}");
                        }
                        None => out.push_str("\t-\t-"),
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Scores a bundle's sparse reconstructions and the corrected volumes
/// (`sparse - prediction`, clipped to `[0, 1]`) against the full-view
/// reference. `predictions` holds the predicted artifact per view count.
pub fn score_case(
    bundle: &CaseBundle,
    predictions: &BTreeMap<usize, VoxelVolume>,
    method: &str,
    p: &SsimParams,
) -> Result<MetricsTable> {
    let mut rows = Vec::new();
    for (&views, sparse) in &bundle.sparse {
        let pred = predictions
            .get(&views)
            .ok_or_else(|| crate::Error::IncompleteSet(format!("no prediction for {views} views")))?;
        let corrected = clip_corrected(&apply_correction(sparse, pred)?)?;
        rows.push(MetricRow {
            geometry: bundle.kind,
            views,
            sparse: score_volume(&bundle.full, sparse, p)?,
            corrected: score_volume(&bundle.full, &corrected, p)?,
        });
    }
    Ok(MetricsTable {
        method: method.to_string(),
        rows,
    })
}
