//! Sparse-view simulation: project a HU volume to a full-view sinogram,
//! reconstruct the full-view reference and every sparse subset, window and
//! normalize, and derive residual targets.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{ensure_shape, invalid, Result};
use crate::projector::{forward_project_cone, forward_project_slice};
use crate::recon::{fbp_fan, fbp_parallel, fdk_cone, FilterSpec};
use crate::types::{
    ensure_unit, BeamGeometry, BeamKind, Image, Sinogram, Unit, ViewSubset, VoxelVolume, WindowSpec, FULL_VIEWS,
    SPARSE_VIEWS,
};

/// Normalized intensities are snapped to multiples of 2^-24. Every such value,
/// and every difference of two of them, is exact in `f32`, so
/// `sparse - (sparse - full) == full` holds bit for bit.
const NORMALIZED_GRID: f64 = (1u64 << 24) as f64;

/// HU to attenuation relative to water: air -1000 HU maps to 0, water to 1.
pub fn hu_to_attenuation(vol: &VoxelVolume) -> Result<VoxelVolume> {
    ensure_unit(Unit::Hu, vol.unit())?;
    vol.map(Unit::Attenuation, |h| ((h as f64 + 1000.0) / 1000.0) as f32)
}

pub fn attenuation_to_hu(vol: &VoxelVolume) -> Result<VoxelVolume> {
    ensure_unit(Unit::Attenuation, vol.unit())?;
    vol.map(Unit::Hu, |m| (m as f64 * 1000.0 - 1000.0) as f32)
}

/// Keeps every `total / kept`-th view starting at view 0.
pub fn subsample_views(sino: &Sinogram, kept: usize) -> Result<Sinogram> {
    let subset = ViewSubset::new(sino.n_views(), kept)?;
    let per_view = sino.view(0).len();
    let mut values = Vec::with_capacity(kept * per_view);
    let mut angles = Vec::with_capacity(kept);
    for &v in &subset.indices {
        values.extend_from_slice(sino.view(v));
        angles.push(sino.angles()[v]);
    }
    Sinogram::new(angles, values, *sino.geometry())
}

#[inline]
fn window_value(hu: f32, lo: f64, width: f64) -> f32 {
    let x = ((hu as f64 - lo) / width).clamp(0.0, 1.0);
    ((x * NORMALIZED_GRID).round() / NORMALIZED_GRID) as f32
}

/// Clips to `[level - width/2, level + width/2]` and maps affinely onto `[0, 1]`.
pub fn window_normalize(vol: &VoxelVolume, window: WindowSpec) -> Result<VoxelVolume> {
    ensure_unit(Unit::Hu, vol.unit())?;
    let lo = window.lower();
    vol.map(Unit::Normalized, |h| window_value(h, lo, window.width))
}

pub fn window_normalize_image(img: &Image, window: WindowSpec) -> Result<Image> {
    ensure_unit(Unit::Hu, img.unit)?;
    let lo = window.lower();
    Image::new(
        img.nx,
        img.ny,
        img.spacing,
        Unit::Normalized,
        img.values.iter().map(|&h| window_value(h, lo, window.width)).collect(),
    )
}

fn same_grid(a: &VoxelVolume, b: &VoxelVolume) -> Result<()> {
    ensure_shape(&a.shape(), &b.shape())
}

/// `full - sparse`, elementwise, in normalized units.
pub fn residual_target(full: &VoxelVolume, sparse: &VoxelVolume) -> Result<VoxelVolume> {
    ensure_unit(Unit::Normalized, full.unit())?;
    ensure_unit(Unit::Normalized, sparse.unit())?;
    same_grid(full, sparse)?;
    VoxelVolume::new(
        full.shape(),
        full.spacing(),
        Unit::Difference,
        full.values().iter().zip(sparse.values()).map(|(f, s)| f - s).collect(),
    )
}

/// `sparse - prediction`, where the network predicts the artifact
/// `sparse - full`. The result is not clipped; see [`clip_corrected`].
pub fn apply_correction(sparse: &VoxelVolume, prediction: &VoxelVolume) -> Result<VoxelVolume> {
    ensure_unit(Unit::Normalized, sparse.unit())?;
    ensure_unit(Unit::Difference, prediction.unit())?;
    same_grid(sparse, prediction)?;
    VoxelVolume::new(
        sparse.shape(),
        sparse.spacing(),
        Unit::Corrected,
        sparse
            .values()
            .iter()
            .zip(prediction.values())
            .map(|(s, p)| s - p)
            .collect(),
    )
}

/// Clips a corrected volume to `[0, 1]` for reporting.
pub fn clip_corrected(corrected: &VoxelVolume) -> Result<VoxelVolume> {
    ensure_unit(Unit::Corrected, corrected.unit())?;
    corrected.map(Unit::Normalized, |v| v.clamp(0.0, 1.0))
}

/// Options for [`simulate_case`].
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub full_views: usize,
    pub sparse_views: Vec<usize>,
    pub filter: FilterSpec,
    pub subject: String,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            full_views: FULL_VIEWS,
            sparse_views: SPARSE_VIEWS.to_vec(),
            filter: FilterSpec::default(),
            subject: "subject".into(),
        }
    }
}

/// Everything derived from one subject under one geometry.
#[derive(Debug, Clone)]
pub struct CaseBundle {
    pub subject: String,
    pub kind: BeamKind,
    pub geometry: BeamGeometry,
    pub window: WindowSpec,
    pub full_views: usize,
    /// Full-view reconstruction, normalized.
    pub full: VoxelVolume,
    /// Sparse-view reconstructions by view count, normalized.
    pub sparse: BTreeMap<usize, VoxelVolume>,
    /// `full - sparse` by view count.
    pub residual: BTreeMap<usize, VoxelVolume>,
}

impl CaseBundle {
    /// The training target `sparse - full` for a view level (the negated residual).
    pub fn artifact(&self, views: usize) -> Result<VoxelVolume> {
        let r = self
            .residual
            .get(&views)
            .ok_or_else(|| invalid(format!("no {views}-view level in bundle")))?;
        r.map(Unit::Difference, |v| -v)
    }

    pub fn views(&self) -> impl Iterator<Item = usize> + '_ {
        self.sparse.keys().copied()
    }
}

fn reconstruct_slice(sino: &Sinogram, shape: [usize; 2], spacing: [f64; 2], filter: FilterSpec) -> Result<Image> {
    match sino.geometry().kind {
        BeamKind::Parallel => fbp_parallel(sino, shape, spacing, filter),
        BeamKind::Fan => fbp_fan(sino, shape, spacing, filter),
        BeamKind::Cone => Err(invalid("cone-beam data are reconstructed volumetrically")),
    }
}

/// Reconstructions of one volume at the full view count and each sparse level,
/// in attenuation units, keyed by view count.
pub fn reconstruct_levels(
    attenuation: &VoxelVolume,
    geometry: &BeamGeometry,
    full_views: usize,
    levels: &[usize],
    filter: FilterSpec,
) -> Result<BTreeMap<usize, VoxelVolume>> {
    ensure_unit(Unit::Attenuation, attenuation.unit())?;
    for &v in levels {
        ViewSubset::new(full_views, v)?;
    }
    let mut all_levels: Vec<usize> = levels.to_vec();
    all_levels.push(full_views);
    all_levels.sort_unstable();
    all_levels.dedup();
    let angles = geometry.angles(full_views);
    let [nx, ny, nz] = attenuation.shape();
    let sp = attenuation.spacing();
    match geometry.kind {
        BeamKind::Parallel | BeamKind::Fan => {
            let per_slice: Vec<Vec<Image>> = (0..nz)
                .into_par_iter()
                .map(|k| -> Result<Vec<Image>> {
                    let sino = forward_project_slice(&attenuation.slice(k), geometry, &angles)?;
                    all_levels
                        .iter()
                        .map(|&v| {
                            let sub = subsample_views(&sino, v)?;
                            reconstruct_slice(&sub, [nx, ny], [sp[0], sp[1]], filter)
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            let mut out = BTreeMap::new();
            for (li, &v) in all_levels.iter().enumerate() {
                let slices: Vec<Image> = per_slice.iter().map(|s| s[li].clone()).collect();
                out.insert(v, VoxelVolume::from_slices(&slices, sp[2])?);
            }
            Ok(out)
        }
        BeamKind::Cone => {
            let sino = forward_project_cone(attenuation, geometry, &angles)?;
            all_levels
                .iter()
                .map(|&v| {
                    let sub = subsample_views(&sino, v)?;
                    Ok((v, fdk_cone(&sub, [nx, ny, nz], sp, filter)?))
                })
                .collect()
        }
    }
}

/// Runs the whole simulation for one HU volume.
pub fn simulate_case(vol: &VoxelVolume, kind: BeamKind, window: WindowSpec, opts: &SimOptions) -> Result<CaseBundle> {
    ensure_unit(Unit::Hu, vol.unit())?;
    let [nx, ny, _] = vol.shape();
    if nx != ny {
        return Err(invalid(format!("volume must be square in-plane, got {nx}x{ny}")));
    }
    if opts.sparse_views.contains(&opts.full_views) {
        return Err(invalid("sparse levels must differ from the full view count"));
    }
    let geometry = BeamGeometry::for_volume(kind, vol.shape(), vol.spacing())?;
    let mu = hu_to_attenuation(vol)?;
    let recons = reconstruct_levels(&mu, &geometry, opts.full_views, &opts.sparse_views, opts.filter)?;
    let normalize = |v: &VoxelVolume| window_normalize(&attenuation_to_hu(v)?, window);
    let full = normalize(&recons[&opts.full_views])?;
    let mut sparse = BTreeMap::new();
    let mut residual = BTreeMap::new();
    for &v in &opts.sparse_views {
        let s = normalize(&recons[&v])?;
        residual.insert(v, residual_target(&full, &s)?);
        sparse.insert(v, s);
    }
    Ok(CaseBundle {
        subject: opts.subject.clone(),
        kind,
        geometry,
        window,
        full_views: opts.full_views,
        full,
        sparse,
        residual,
    })
}
