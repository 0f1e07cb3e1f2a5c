//! Domain types shared by every stage of the pipeline.
//!
//! Coordinate conventions:
//!
//! * Volumes are stored x-fastest: `values[(k * ny + j) * nx + i]`, so each axial
//!   (constant-z) slice is one contiguous run of `nx * ny` values.
//! * Voxel `(i, j, k)` has its center at
//!   `((i - (nx-1)/2) * sx, (j - (ny-1)/2) * sy, (k - (nz-1)/2) * sz)` mm, i.e. the
//!   rotation axis passes through the volume center.
//! * Sinograms are stored `[view][row][col]`; 2D geometries have a single row.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, invalid, Error, Result};

/// Source-to-rotation-axis distance of the clinical scanners, in mm.
pub const CLINICAL_SOD_MM: f64 = 570.0;
/// Source-to-detector distance of the clinical scanners, in mm.
pub const CLINICAL_SDD_MM: f64 = 1040.0;
/// Number of views in a full-view acquisition.
pub const FULL_VIEWS: usize = 2048;
/// Sparse view levels produced by default.
pub const SPARSE_VIEWS: [usize; 3] = [32, 64, 128];

/// Intensity unit carried by every image and volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// Hounsfield units.
    Hu,
    /// Linear attenuation relative to water (air = 0, water = 1).
    Attenuation,
    /// Windowed intensities in `[0, 1]`.
    Normalized,
    /// Differences of normalized images (targets and network predictions).
    Difference,
    /// Residual-corrected normalized intensities before clipping to `[0, 1]`.
    Corrected,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Unit::Hu => "hu",
            Unit::Attenuation => "attenuation",
            Unit::Normalized => "normalized",
            Unit::Difference => "difference",
            Unit::Corrected => "corrected",
        };
        f.write_str(s)
    }
}

impl FromStr for Unit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hu" => Ok(Unit::Hu),
            "attenuation" => Ok(Unit::Attenuation),
            "normalized" => Ok(Unit::Normalized),
            "difference" => Ok(Unit::Difference),
            "corrected" => Ok(Unit::Corrected),
            other => Err(invalid(format!("unknown unit '{other}'"))),
        }
    }
}

pub(crate) fn ensure_unit(expected: Unit, found: Unit) -> Result<()> {
    if expected != found {
        return Err(Error::UnitMismatch { expected, found });
    }
    Ok(())
}

/// A 3D scalar field with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    shape: [usize; 3],
    spacing: [f64; 3],
    unit: Unit,
    values: Vec<f32>,
}

impl VoxelVolume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], unit: Unit, values: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid(format!("volume shape {shape:?} has an empty axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("volume spacing {spacing:?} must be positive")));
        }
        ensure_shape(&[shape.iter().product()], &[values.len()])?;
        check_unit_range(unit, &values)?;
        Ok(Self {
            shape,
            spacing,
            unit,
            values,
        })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], unit: Unit, value: f32) -> Result<Self> {
        Self::new(shape, spacing, unit, vec![value; shape.iter().product()])
    }

    /// Stacks equally sized axial slices into a volume.
    pub fn from_slices(slices: &[Image], sz: f64) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| invalid("cannot build a volume from zero slices"))?;
        let mut values = Vec::with_capacity(first.len() * slices.len());
        for s in slices {
            ensure_shape(&[first.nx, first.ny], &[s.nx, s.ny])?;
            ensure_unit(first.unit, s.unit)?;
            values.extend_from_slice(&s.values);
        }
        Self::new(
            [first.nx, first.ny, slices.len()],
            [first.spacing[0], first.spacing[1], sz],
            first.unit,
            values,
        )
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.shape[1] + j) * self.shape[0] + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    /// Axial slice `k` as an image.
    pub fn slice(&self, k: usize) -> Image {
        let n = self.shape[0] * self.shape[1];
        Image {
            nx: self.shape[0],
            ny: self.shape[1],
            spacing: [self.spacing[0], self.spacing[1]],
            unit: self.unit,
            values: self.values[k * n..(k + 1) * n].to_vec(),
        }
    }

    pub fn slice_values(&self, k: usize) -> &[f32] {
        let n = self.shape[0] * self.shape[1];
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slices(&self) -> impl Iterator<Item = Image> + '_ {
        (0..self.shape[2]).map(move |k| self.slice(k))
    }

    /// Applies `f` elementwise, producing a volume tagged with `unit`.
    pub fn map(&self, unit: Unit, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.shape,
            self.spacing,
            unit,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// A single 2D slice, stored x-fastest (`values[j * nx + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub nx: usize,
    pub ny: usize,
    pub spacing: [f64; 2],
    pub unit: Unit,
    pub values: Vec<f32>,
}

impl Image {
    pub fn new(nx: usize, ny: usize, spacing: [f64; 2], unit: Unit, values: Vec<f32>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(invalid("image has an empty axis"));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("image spacing {spacing:?} must be positive")));
        }
        ensure_shape(&[nx * ny], &[values.len()])?;
        check_unit_range(unit, &values)?;
        Ok(Self {
            nx,
            ny,
            spacing,
            unit,
            values,
        })
    }

    pub fn zeros(nx: usize, ny: usize, spacing: [f64; 2], unit: Unit) -> Self {
        Self {
            nx,
            ny,
            spacing,
            unit,
            values: vec![0.0; nx * ny],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[j * self.nx + i]
    }
}

fn check_unit_range(unit: Unit, values: &[f32]) -> Result<()> {
    if unit == Unit::Normalized {
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(invalid(format!("normalized value {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Acquisition geometry family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamKind {
    Parallel,
    Fan,
    Cone,
}

impl BeamKind {
    pub const ALL: [BeamKind; 3] = [BeamKind::Parallel, BeamKind::Fan, BeamKind::Cone];

    pub fn as_str(self) -> &'static str {
        match self {
            BeamKind::Parallel => "parallel",
            BeamKind::Fan => "fan",
            BeamKind::Cone => "cone",
        }
    }
}

impl fmt::Display for BeamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BeamKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parallel" => Ok(BeamKind::Parallel),
            "fan" => Ok(BeamKind::Fan),
            "cone" => Ok(BeamKind::Cone),
            other => Err(invalid(format!(
                "unknown beam geometry '{other}' (expected parallel, fan or cone)"
            ))),
        }
    }
}

/// Scanner geometry. Fan and cone use a flat detector perpendicular to the
/// central ray; the source sits at `sod * (cos b, sin b)` for view angle `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    pub kind: BeamKind,
    pub sod: f64,
    pub sdd: f64,
    pub det_count: usize,
    pub det_spacing: f64,
    pub det_rows: usize,
    pub det_row_spacing: f64,
    pub angular_range: f64,
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.det_count == 0 || self.det_rows == 0 {
            return Err(Error::Geometry("detector must have at least one element".into()));
        }
        if !is_positive(self.det_spacing) || !is_positive(self.det_row_spacing) {
            return Err(Error::Geometry("detector spacings must be positive".into()));
        }
        if !is_positive(self.angular_range) {
            return Err(Error::Geometry("angular range must be positive".into()));
        }
        match self.kind {
            BeamKind::Parallel => {
                if self.det_rows != 1 {
                    return Err(Error::Geometry("parallel beam uses a single detector row".into()));
                }
            }
            BeamKind::Fan | BeamKind::Cone => {
                if !(0.0 < self.sod && self.sod < self.sdd) {
                    return Err(Error::Geometry(format!(
                        "need 0 < sod < sdd, got sod={} sdd={}",
                        self.sod, self.sdd
                    )));
                }
                if self.kind == BeamKind::Fan && self.det_rows != 1 {
                    return Err(Error::Geometry("fan beam uses a single detector row".into()));
                }
            }
        }
        Ok(())
    }

    /// Detector magnification at the rotation axis (1 for parallel beams).
    pub fn magnification(&self) -> f64 {
        match self.kind {
            BeamKind::Parallel => 1.0,
            BeamKind::Fan | BeamKind::Cone => self.sdd / self.sod,
        }
    }

    /// Detector column spacing rescaled to the rotation axis.
    pub fn virtual_spacing(&self) -> f64 {
        self.det_spacing / self.magnification()
    }

    /// Radius of the circle around the rotation axis seen by every view.
    pub fn fov_radius(&self) -> f64 {
        let half = 0.5 * self.det_count as f64 * self.virtual_spacing();
        match self.kind {
            BeamKind::Parallel => half,
            BeamKind::Fan | BeamKind::Cone => self.sod * half / (self.sod * self.sod + half * half).sqrt(),
        }
    }

    /// `n` evenly spaced view angles over `[0, angular_range)`, starting at 0.
    pub fn angles(&self, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.angular_range * k as f64 / n as f64).collect()
    }

    /// Geometry sized so that a volume of the given shape is never truncated.
    ///
    /// Columns: the circumscribed circle of the axial slice must fit in the field
    /// of view. Rows (cone only): every voxel must project onto the detector from
    /// every source position. Counts are rounded up to multiples of 16 (columns)
    /// or to the parity of `nz` (rows) so detector and voxel centers line up.
    pub fn for_volume(kind: BeamKind, shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let pitch = spacing[0].max(spacing[1]);
        let radius = 0.5 * ((shape[0] as f64 * spacing[0]).powi(2) + (shape[1] as f64 * spacing[1]).powi(2)).sqrt();
        let round16 = |x: f64| ((x / 16.0).ceil() as usize).max(1) * 16;
        match kind {
            BeamKind::Parallel => make_clinical_geometry(kind, round16(2.0 * radius / pitch), pitch),
            BeamKind::Fan | BeamKind::Cone => {
                let sod = CLINICAL_SOD_MM;
                if radius >= sod {
                    return Err(Error::Geometry(format!(
                        "volume radius {radius:.1} mm does not fit inside the source orbit ({sod} mm)"
                    )));
                }
                let half = radius * sod / (sod * sod - radius * radius).sqrt();
                let mag = CLINICAL_SDD_MM / sod;
                let mut g = make_clinical_geometry(kind, round16(2.0 * half / pitch), pitch * mag)?;
                if kind == BeamKind::Cone {
                    let needed = shape[2] as f64 * sod / (sod - radius);
                    let mut rows = needed.ceil() as usize;
                    if rows % 2 != shape[2] % 2 {
                        rows += 1;
                    }
                    g.det_rows = rows;
                    g.det_row_spacing = spacing[2] * mag;
                }
                Ok(g)
            }
        }
    }
}

/// False for NaN.
fn is_positive(x: f64) -> bool {
    x > 0.0
}

/// Clinical scanner geometry: SOD 570 mm and SDD 1040 mm for fan and cone
/// beams, half-turn parallel or full-turn divergent acquisition. Cone beams get
/// a square detector (`det_rows = det_count`) until resized for a volume.
pub fn make_clinical_geometry(kind: BeamKind, det_count: usize, det_spacing: f64) -> Result<BeamGeometry> {
    let g = match kind {
        BeamKind::Parallel => BeamGeometry {
            kind,
            sod: f64::INFINITY,
            sdd: f64::INFINITY,
            det_count,
            det_spacing,
            det_rows: 1,
            det_row_spacing: det_spacing,
            angular_range: PI,
        },
        BeamKind::Fan | BeamKind::Cone => BeamGeometry {
            kind,
            sod: CLINICAL_SOD_MM,
            sdd: CLINICAL_SDD_MM,
            det_count,
            det_spacing,
            det_rows: if kind == BeamKind::Cone { det_count } else { 1 },
            det_row_spacing: det_spacing,
            angular_range: 2.0 * PI,
        },
    };
    g.validate()?;
    Ok(g)
}

/// Projection data with its acquisition geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    angles: Vec<f64>,
    values: Vec<f32>,
    geometry: BeamGeometry,
}

impl Sinogram {
    pub fn new(angles: Vec<f64>, values: Vec<f32>, geometry: BeamGeometry) -> Result<Self> {
        geometry.validate()?;
        if angles.is_empty() {
            return Err(invalid("sinogram needs at least one view"));
        }
        if angles
            .windows(2)
            .any(|w| w[0].is_nan() || w[1].is_nan() || w[1] <= w[0])
        {
            return Err(invalid("view angles must be strictly increasing"));
        }
        if angles[0] < 0.0 || *angles.last().unwrap() >= geometry.angular_range {
            return Err(invalid("view angles must lie in [0, angular_range)"));
        }
        ensure_shape(
            &[angles.len() * geometry.det_rows * geometry.det_count],
            &[values.len()],
        )?;
        Ok(Self {
            angles,
            values,
            geometry,
        })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn geometry(&self) -> &BeamGeometry {
        &self.geometry
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    /// `[views, rows, cols]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.angles.len(), self.geometry.det_rows, self.geometry.det_count]
    }

    pub fn view(&self, v: usize) -> &[f32] {
        let n = self.geometry.det_rows * self.geometry.det_count;
        &self.values[v * n..(v + 1) * n]
    }
}

/// HU display window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub width: f64,
    pub level: f64,
}

impl WindowSpec {
    /// The wide window used for all training data.
    pub const WIDE: WindowSpec = WindowSpec {
        width: 2048.0,
        level: 0.0,
    };
    /// The narrow lung window.
    pub const LUNG: WindowSpec = WindowSpec {
        width: 1700.0,
        level: -600.0,
    };

    pub fn new(width: f64, level: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite() && level.is_finite()) {
            return Err(invalid(format!("window width must be positive, got {width}")));
        }
        Ok(Self { width, level })
    }

    pub fn lower(&self) -> f64 {
        self.level - 0.5 * self.width
    }

    pub fn upper(&self) -> f64 {
        self.level + 0.5 * self.width
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::WIDE
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.level)
    }
}

impl FromStr for WindowSpec {
    type Err = Error;
    /// Parses `WIDTHxLEVEL`, e.g. `2048x0` or `1700x-600`.
    fn from_str(s: &str) -> Result<Self> {
        let (w, l) = s
            .split_once('x')
            .ok_or_else(|| invalid(format!("window '{s}' is not WIDTHxLEVEL")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("window '{s}' is not WIDTHxLEVEL")))
        };
        WindowSpec::new(parse(w)?, parse(l)?)
    }
}

/// Uniform-stride view selection with phase 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSubset {
    pub total_views: usize,
    pub kept_views: usize,
    pub indices: Vec<usize>,
}

impl ViewSubset {
    pub fn new(total_views: usize, kept_views: usize) -> Result<Self> {
        if kept_views == 0 || total_views == 0 || !total_views.is_multiple_of(kept_views) {
            return Err(invalid(format!(
                "{kept_views} views do not evenly divide {total_views}"
            )));
        }
        let stride = total_views / kept_views;
        Ok(Self {
            total_views,
            kept_views,
            indices: (0..kept_views).map(|k| k * stride).collect(),
        })
    }

    pub fn stride(&self) -> usize {
        self.total_views / self.kept_views
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clinical_fan_geometry() {
        let g = make_clinical_geometry(BeamKind::Fan, 1024, 1.2).unwrap();
        assert_eq!(g.sod, 570.0);
        assert_eq!(g.sdd, 1040.0);
        assert_eq!(g.angular_range, 2.0 * PI);
        assert_eq!(g.det_rows, 1);
    }

    #[test]
    fn clinical_parallel_geometry() {
        let g = make_clinical_geometry(BeamKind::Parallel, 736, 1.0).unwrap();
        assert_eq!(g.magnification(), 1.0);
        assert_eq!(g.angular_range, PI);
        assert_eq!(g.fov_radius(), 368.0);
    }

    #[test]
    fn clinical_cone_geometry() {
        let g = make_clinical_geometry(BeamKind::Cone, 1024, 1.2).unwrap();
        assert_eq!(g.angular_range, 2.0 * PI);
        assert_eq!(g.det_rows, 1024);
        assert_eq!(g.det_row_spacing, 1.2);
        assert!((g.magnification() - 1040.0 / 570.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("helical".parse::<BeamKind>(), Err(Error::InvalidInput(_))));
        assert_eq!("Cone".parse::<BeamKind>().unwrap(), BeamKind::Cone);
    }

    #[test]
    fn empty_detector_rejected() {
        assert!(make_clinical_geometry(BeamKind::Fan, 0, 1.0).is_err());
    }

    #[test]
    fn default_sizing_for_clinical_matrix() {
        let shape = [512, 512, 64];
        let sp = [1.0; 3];
        let p = BeamGeometry::for_volume(BeamKind::Parallel, shape, sp).unwrap();
        assert_eq!(p.det_count, 736);
        assert_eq!(p.det_spacing, 1.0);
        let f = BeamGeometry::for_volume(BeamKind::Fan, shape, sp).unwrap();
        assert!((f.det_spacing - 1040.0 / 570.0).abs() < 1e-12);
        let half_diag = 256.0 * 2f64.sqrt();
        assert!(f.fov_radius() >= half_diag);
        let c = BeamGeometry::for_volume(BeamKind::Cone, shape, sp).unwrap();
        assert_eq!(c.det_rows % 2, 0);
        let near = 570.0 - half_diag;
        assert!(c.det_rows as f64 * c.det_row_spacing / 2.0 >= 32.0 * 1040.0 / near);
    }

    #[test]
    fn view_subset_strides() {
        for k in [32, 64, 128, 2048] {
            let s = ViewSubset::new(2048, k).unwrap();
            assert_eq!(s.stride(), 2048 / k);
            assert!(s.indices.iter().enumerate().all(|(n, &i)| i == n * (2048 / k)));
        }
        assert!(ViewSubset::new(2048, 100).is_err());
    }

    #[test]
    fn window_parsing() {
        assert_eq!("2048x0".parse::<WindowSpec>().unwrap(), WindowSpec::WIDE);
        assert_eq!("1700x-600".parse::<WindowSpec>().unwrap(), WindowSpec::LUNG);
        assert!("0x0".parse::<WindowSpec>().is_err());
        assert!("abc".parse::<WindowSpec>().is_err());
    }

    #[test]
    fn normalized_range_enforced() {
        assert!(VoxelVolume::new([1, 1, 2], [1.0; 3], Unit::Normalized, vec![0.5, 1.5]).is_err());
        assert!(VoxelVolume::new([1, 1, 2], [1.0; 3], Unit::Hu, vec![0.5, 1.5]).is_ok());
        assert!(VoxelVolume::new([0, 1, 2], [1.0; 3], Unit::Hu, vec![]).is_err());
        assert!(VoxelVolume::new([1, 1, 1], [0.0, 1.0, 1.0], Unit::Hu, vec![0.0]).is_err());
    }

    #[test]
    fn sinogram_angle_checks() {
        let g = make_clinical_geometry(BeamKind::Parallel, 4, 1.0).unwrap();
        assert!(Sinogram::new(vec![0.0, 0.5], vec![0.0; 8], g).is_ok());
        assert!(Sinogram::new(vec![0.5, 0.5], vec![0.0; 8], g).is_err());
        assert!(Sinogram::new(vec![0.0, 4.0], vec![0.0; 8], g).is_err());
        assert!(Sinogram::new(vec![0.0, 0.5], vec![0.0; 7], g).is_err());
    }
}
