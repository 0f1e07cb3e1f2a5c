//! Command implementations behind the `sparsect` binary.
//!
//! Dataset tree written under a root directory:
//!
//! ```text
//! manifest.json
//! cases/<subject>/<geometry>/full.spct          full-view reconstruction
//! cases/<subject>/<geometry>/sparse_<v>.spct    sparse-view reconstruction
//! cases/<subject>/<geometry>/target_<v>.spct    artifact, sparse - full
//! cases/<subject>/<geometry>/summary.tsv
//! samples/<mode>/<subject>/<geometry>/<v>/input_<n>.spct
//! samples/<mode>/<subject>/<geometry>/<v>/target_<n>.spct
//! ```
//!
//! A prediction for a sample lives in the predictions directory under the
//! same relative path as the sample's target file.

pub mod pgm;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use serde::Serialize;
use serde_json::{json, Map, Value};

use sparsect::blocks::{
    decompose, extract_25d, extract_2d3ch, extract_directional_patch, plan_grid, reassemble, Block, BlockGrid, Plane,
};
use sparsect::io::{read_header, read_tensor, read_volume, resolve, write_tensor, write_volume, TensorMeta};
use sparsect::manifest::{
    assign_splits, DatasetManifest, ExtractionRecord, ManifestEntry, Role, SampleMode, Split, MANIFEST_FILE,
};
use sparsect::metrics::{mse, score_volume, ssim, ssim_multichannel, MetricRow, MetricsTable, Score, SsimParams};
use sparsect::phantom::{generate_phantom_supersampled, half_extent, random_specs, EllipsoidSpec};
use sparsect::sim::{apply_correction, clip_corrected, simulate_case, SimOptions};
use sparsect::{BeamKind, Unit, VoxelVolume, WindowSpec, FULL_VIEWS};

/// View counts accepted on the command line.
pub const ALLOWED_VIEWS: [usize; 4] = [32, 64, 128, FULL_VIEWS];

/// Range mapped onto the gray scale of exported difference images.
pub const DIFFERENCE_RANGE: f32 = 0.3;

pub fn parse_views(s: &str) -> Result<Vec<usize>> {
    let mut views = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: usize = part.parse().with_context(|| format!("bad view count '{part}'"))?;
        ensure!(ALLOWED_VIEWS.contains(&v), "view count {v} not in {ALLOWED_VIEWS:?}");
        views.push(v);
    }
    ensure!(!views.is_empty(), "no view counts given");
    views.sort_unstable();
    views.dedup();
    Ok(views)
}

pub fn parse_geometries(s: &str) -> Result<Vec<BeamKind>> {
    let mut out: Vec<BeamKind> = s
        .split(',')
        .map(|p| p.trim().parse::<BeamKind>().map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

fn provenance(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    DatasetManifest::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn save_manifest(root: &Path, m: &DatasetManifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    m.save(&path).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- phantom

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub out: PathBuf,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// JSON list of ellipsoids; overrides the seeded chest-like phantom.
    pub spec: Option<PathBuf>,
    pub supersample: usize,
}

pub fn cmd_phantom(cfg: &PhantomConfig) -> Result<VoxelVolume> {
    let specs: Vec<EllipsoidSpec> = match &cfg.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing ellipsoid list {}", p.display()))?
        }
        None => random_specs(half_extent(cfg.shape, cfg.spacing), cfg.seed),
    };
    let vol = generate_phantom_supersampled(cfg.shape, cfg.spacing, &specs, cfg.supersample)?;
    let prov = provenance(&[
        ("source", json!("phantom")),
        ("seed", json!(cfg.seed)),
        ("ellipsoids", serde_json::to_value(&specs)?),
    ]);
    write_volume(&cfg.out, &vol, prov).with_context(|| format!("writing {}", cfg.out.display()))?;
    info!("wrote {:?} phantom to {}", cfg.shape, cfg.out.display());
    Ok(vol)
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone)]
pub struct SimulateConfig {
    pub input: PathBuf,
    pub subject: String,
    pub geometries: Vec<BeamKind>,
    /// Sparse levels; a 2048 entry, if present, is the full-view level.
    pub views: Vec<usize>,
    pub window: WindowSpec,
    pub root: PathBuf,
}

fn case_dir(subject: &str, kind: BeamKind) -> String {
    format!("cases/{subject}/{kind}")
}

fn check_subject_id(id: &str) -> Result<()> {
    ensure!(
        !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && id != "." && id != "..",
        "subject id '{id}' must be nonempty and use only letters, digits, '-', '_' or '.'"
    );
    Ok(())
}

/// Simulates one HU volume for each requested geometry and records the
/// results in the manifest. Returns the sparse-vs-full scores per geometry.
pub fn cmd_simulate(cfg: &SimulateConfig) -> Result<BTreeMap<BeamKind, Vec<(usize, Score)>>> {
    check_subject_id(&cfg.subject)?;
    let (vol, _) = read_volume(&cfg.input).with_context(|| format!("reading {}", cfg.input.display()))?;
    ensure!(
        vol.unit() == Unit::Hu,
        "input volume must be in HU, found {}",
        vol.unit()
    );
    let sparse: Vec<usize> = cfg.views.iter().copied().filter(|&v| v != FULL_VIEWS).collect();
    ensure!(!sparse.is_empty(), "no sparse view counts requested");
    let opts = SimOptions {
        sparse_views: sparse,
        subject: cfg.subject.clone(),
        ..SimOptions::default()
    };
    let mut manifest = DatasetManifest::load_or_default(&cfg.root)?;
    manifest.ensure_subject(&cfg.subject);
    let window = cfg.window.to_string();
    let ssim_params = SsimParams::default();
    let mut summary = BTreeMap::new();
    for &kind in &cfg.geometries {
        info!("simulating {} with {kind} beam", cfg.subject);
        let bundle = simulate_case(&vol, kind, cfg.window, &opts)?;
        let dir = case_dir(&cfg.subject, kind);
        let [nx, ny, nz] = vol.shape();
        let shape = vec![nz, ny, nx];
        let base = |role: &str, views: usize| {
            provenance(&[
                ("subject", json!(cfg.subject)),
                ("geometry", json!(kind)),
                ("views", json!(views)),
                ("window", json!(window)),
                ("role", json!(role)),
                ("beam", serde_json::to_value(bundle.geometry).unwrap_or(Value::Null)),
            ])
        };
        let put =
            |role: Role, views: usize, name: String, v: &VoxelVolume, manifest: &mut DatasetManifest| -> Result<()> {
                let rel = format!("{dir}/{name}");
                let role_name = serde_json::to_value(role)?.as_str().unwrap_or_default().to_string();
                write_volume(resolve(&cfg.root, &rel)?, v, base(&role_name, views))?;
                manifest.upsert(ManifestEntry {
                    subject: cfg.subject.clone(),
                    geometry: kind,
                    views,
                    window: window.clone(),
                    role,
                    mode: None,
                    sample: None,
                    index: None,
                    block: None,
                    path: rel,
                    shape: shape.clone(),
                });
                Ok(())
            };
        put(
            Role::Full,
            bundle.full_views,
            "full.spct".into(),
            &bundle.full,
            &mut manifest,
        )?;
        let mut rows = Vec::new();
        let mut tsv = String::from("views\tmse\tssim\n");
        for v in bundle.views().collect::<Vec<_>>() {
            put(
                Role::Sparse,
                v,
                format!("sparse_{v}.spct"),
                &bundle.sparse[&v],
                &mut manifest,
            )?;
            put(
                Role::Target,
                v,
                format!("target_{v}.spct"),
                &bundle.artifact(v)?,
                &mut manifest,
            )?;
            let s = score_volume(&bundle.full, &bundle.sparse[&v], &ssim_params)?;
            let _ = writeln!(tsv, "{v}\t{:.6e}\t{:.6}", s.mse, s.ssim);
            rows.push((v, s));
        }
        let summary_path = resolve(&cfg.root, &format!("{dir}/summary.tsv"))?;
        std::fs::write(&summary_path, tsv).with_context(|| format!("writing {}", summary_path.display()))?;
        summary.insert(kind, rows);
    }
    save_manifest(&cfg.root, &manifest)?;
    Ok(summary)
}

// ---------------------------------------------------------------- split

pub fn cmd_split(root: &Path, seed: u64) -> Result<BTreeMap<String, Split>> {
    let mut m = load_manifest(root)?;
    let ids: Vec<String> = m.subjects.iter().map(|s| s.id.clone()).collect();
    let splits = assign_splits(&ids, seed)?;
    m.apply_splits(&splits)?;
    save_manifest(root, &m)?;
    Ok(splits)
}

// ---------------------------------------------------------------- extract

#[derive(Debug, Clone)]
pub struct ExtractConfig {
    pub root: PathBuf,
    pub mode: SampleMode,
    pub block_size: usize,
    pub margin: usize,
}

fn patch_plane(mode: SampleMode) -> Option<Plane> {
    match mode {
        SampleMode::PatchAxial => Some(Plane::Axial),
        SampleMode::PatchCoronal => Some(Plane::Coronal),
        SampleMode::PatchSagittal => Some(Plane::Sagittal),
        _ => None,
    }
}

/// A simulated case: one subject under one geometry.
#[derive(Debug, Clone)]
struct Case<'a> {
    subject: &'a str,
    geometry: BeamKind,
    full: &'a ManifestEntry,
    sparse: BTreeMap<usize, &'a ManifestEntry>,
    targets: BTreeMap<usize, &'a ManifestEntry>,
}

fn cases(m: &DatasetManifest) -> Result<Vec<Case<'_>>> {
    let mut out: BTreeMap<(&str, BeamKind), Case> = BTreeMap::new();
    for e in m.entries.iter().filter(|e| e.role == Role::Full) {
        out.insert(
            (e.subject.as_str(), e.geometry),
            Case {
                subject: &e.subject,
                geometry: e.geometry,
                full: e,
                sparse: BTreeMap::new(),
                targets: BTreeMap::new(),
            },
        );
    }
    for e in m.entries.iter().filter(|e| e.mode.is_none()) {
        let slot = match e.role {
            Role::Sparse | Role::Target => out
                .get_mut(&(e.subject.as_str(), e.geometry))
                .with_context(|| format!("'{}' has no full-view reference", e.path))?,
            _ => continue,
        };
        let map = if e.role == Role::Sparse {
            &mut slot.sparse
        } else {
            &mut slot.targets
        };
        map.insert(e.views, e);
    }
    for c in out.values() {
        ensure!(
            c.sparse.keys().eq(c.targets.keys()),
            "case {}/{} has mismatched sparse and target levels",
            c.subject,
            c.geometry
        );
    }
    Ok(out.into_values().collect())
}

fn load_entry_volume(root: &Path, e: &ManifestEntry) -> Result<VoxelVolume> {
    let path = resolve(root, &e.path)?;
    let (v, _) = read_volume(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(v)
}

fn sample_dir(mode: SampleMode, subject: &str, kind: BeamKind, views: usize) -> String {
    format!("samples/{mode}/{subject}/{kind}/{views}")
}

/// One input/target pair before it is written.
struct Sample {
    index: Option<usize>,
    block: Option<[usize; 3]>,
    input: Vec<f32>,
    target: Vec<f32>,
}

fn slice_samples(mode: SampleMode, sparse: &VoxelVolume, target: &VoxelVolume) -> Result<Vec<Sample>> {
    let nz = sparse.shape()[2];
    (0..nz)
        .map(|z| {
            let (input, target) = match mode {
                SampleMode::Slice2d => (sparse.slice_values(z).to_vec(), target.slice_values(z).to_vec()),
                _ => (extract_2d3ch(sparse, z)?, target.slice_values(z).to_vec()),
            };
            Ok(Sample {
                index: Some(z),
                block: None,
                input,
                target,
            })
        })
        .collect()
}

fn block_view(mode: SampleMode, b: &Block) -> Vec<f32> {
    match mode {
        SampleMode::Block3d => b.values.clone(),
        SampleMode::Block25d => extract_25d(b),
        _ => extract_directional_patch(b, patch_plane(mode).expect("patch mode")),
    }
}

fn block_samples(
    mode: SampleMode,
    sparse: &VoxelVolume,
    target: &VoxelVolume,
    grid: &BlockGrid,
) -> Result<Vec<Sample>> {
    Ok(decompose(sparse, grid)?
        .zip(decompose(target, grid)?)
        .map(|(s, t)| Sample {
            index: None,
            block: Some(s.coords),
            input: block_view(mode, &s),
            target: block_view(mode, &t),
        })
        .collect())
}

/// Cuts training samples for one mode from every simulated case. Returns the
/// number of samples written.
pub fn cmd_extract(cfg: &ExtractConfig) -> Result<usize> {
    let mut m = load_manifest(&cfg.root)?;
    let mode = cfg.mode;
    if mode.is_block_based() {
        plan_grid([1, 1, 1], cfg.block_size, cfg.margin)?;
    }
    let mut new_entries = Vec::new();
    let mut total = 0;
    for case in cases(&m)? {
        let full_shape = [case.full.shape[2], case.full.shape[1], case.full.shape[0]];
        let grid = plan_grid(full_shape, cfg.block_size, cfg.margin)?;
        for (&views, sparse_entry) in &case.sparse {
            let sparse = load_entry_volume(&cfg.root, sparse_entry)?;
            let target = load_entry_volume(&cfg.root, case.targets[&views])?;
            ensure!(
                target.unit() == Unit::Difference,
                "target {} is not a difference volume",
                case.targets[&views].path
            );
            let samples = if mode.is_block_based() {
                block_samples(mode, &sparse, &target, &grid)?
            } else {
                slice_samples(mode, &sparse, &target)?
            };
            let input_shape = mode.sample_shape(full_shape, cfg.block_size);
            let target_shape = mode.target_shape(full_shape, cfg.block_size);
            let dir = sample_dir(mode, case.subject, case.geometry, views);
            for (n, s) in samples.iter().enumerate() {
                for (role, name, values, unit, shape) in [
                    (
                        mode.input_role(),
                        format!("input_{n:05}.spct"),
                        &s.input,
                        Unit::Normalized,
                        &input_shape,
                    ),
                    (
                        Role::Target,
                        format!("target_{n:05}.spct"),
                        &s.target,
                        Unit::Difference,
                        &target_shape,
                    ),
                ] {
                    let rel = format!("{dir}/{name}");
                    let mut meta = TensorMeta::new(shape.clone(), unit);
                    meta.provenance = provenance(&[
                        ("subject", json!(case.subject)),
                        ("geometry", json!(case.geometry)),
                        ("views", json!(views)),
                        ("window", json!(sparse_entry.window)),
                        ("mode", json!(mode)),
                        ("sample", json!(n)),
                        ("role", serde_json::to_value(role)?),
                    ]);
                    if let Some(z) = s.index {
                        meta.provenance.insert("index".into(), json!(z));
                    }
                    if let Some(b) = s.block {
                        meta.provenance.insert("block".into(), json!(b));
                    }
                    write_tensor(resolve(&cfg.root, &rel)?, values, &meta)?;
                    new_entries.push(ManifestEntry {
                        subject: case.subject.to_string(),
                        geometry: case.geometry,
                        views,
                        window: sparse_entry.window.clone(),
                        role,
                        mode: Some(mode),
                        sample: Some(n),
                        index: s.index,
                        block: s.block,
                        path: rel,
                        shape: shape.clone(),
                    });
                }
            }
            info!(
                "{mode}: {} samples for {}/{}/{views} views",
                samples.len(),
                case.subject,
                case.geometry
            );
            total += samples.len();
        }
    }
    m.entries.retain(|e| e.mode != Some(mode));
    m.entries.extend(new_entries);
    m.set_extraction(ExtractionRecord {
        mode,
        block_size: mode.is_block_based().then_some(cfg.block_size),
        margin: mode.is_block_based().then_some(cfg.margin),
    });
    save_manifest(&cfg.root, &m)?;
    Ok(total)
}

// ---------------------------------------------------------------- baseline

/// Which subjects a command looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    All,
    Only(Split),
}

impl std::str::FromStr for SplitFilter {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(SplitFilter::All)
        } else {
            Ok(SplitFilter::Only(s.parse()?))
        }
    }
}

impl SplitFilter {
    fn admits(self, m: &DatasetManifest, subject: &str) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Only(s) => m.subject_split(subject) == Some(s),
        }
    }
}

/// Writes `scale * target` as the prediction for every sample of `mode`:
/// scale 0 gives the uncorrected baseline, scale 1 the oracle.
pub fn cmd_baseline(root: &Path, mode: SampleMode, scale: f32, split: SplitFilter, out: &Path) -> Result<usize> {
    let m = load_manifest(root)?;
    let mut n = 0;
    for (_, target) in m.sample_pairs()?.values().filter(|(i, _)| i.mode == Some(mode)) {
        if !split.admits(&m, &target.subject) {
            continue;
        }
        let (values, mut meta) = read_tensor(resolve(root, &target.path)?)?;
        let scaled: Vec<f32> = values.iter().map(|v| v * scale).collect();
        meta.provenance.insert("role".into(), json!("prediction"));
        meta.provenance
            .insert("predictor".into(), json!(format!("baseline x{scale}")));
        write_tensor(resolve(out, &target.path)?, &scaled, &meta)?;
        n += 1;
    }
    ensure!(n > 0, "no {mode} samples to predict; run extract first");
    Ok(n)
}

// ---------------------------------------------------------------- score

#[derive(Debug, Clone)]
pub struct ScoreConfig {
    pub root: PathBuf,
    pub mode: SampleMode,
    pub predictions: PathBuf,
    pub split: SplitFilter,
    pub out: PathBuf,
    pub export_images: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseScore {
    pub subject: String,
    pub table: MetricsTable,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub mode: SampleMode,
    pub mean: MetricsTable,
    pub cases: Vec<CaseScore>,
}

fn read_prediction(cfg: &ScoreConfig, target: &ManifestEntry) -> Result<Vec<f32>> {
    let path = resolve(&cfg.predictions, &target.path)?;
    if !path.exists() {
        return Err(sparsect::Error::IncompleteSet(format!("missing prediction {}", path.display())).into());
    }
    let (values, meta) = read_tensor(&path)?;
    ensure!(
        meta.shape == target.shape,
        "prediction {} has shape {:?}, expected {:?}",
        path.display(),
        meta.shape,
        target.shape
    );
    ensure!(
        meta.unit == Unit::Difference,
        "prediction {} has unit {}",
        path.display(),
        meta.unit
    );
    Ok(values)
}

/// Predicted artifact volume rebuilt from per-sample predictions.
fn assemble_prediction(
    cfg: &ScoreConfig,
    m: &DatasetManifest,
    samples: &[(&ManifestEntry, &ManifestEntry)],
    like: &VoxelVolume,
) -> Result<VoxelVolume> {
    let [nx, ny, nz] = like.shape();
    match cfg.mode {
        SampleMode::Slice2d | SampleMode::Slice2d3ch => {
            let mut out = vec![0.0f32; nx * ny * nz];
            let mut seen = vec![false; nz];
            for (_, target) in samples {
                let z = target.index.context("slice sample without index")?;
                ensure!(z < nz, "slice index {z} outside volume");
                let pred = read_prediction(cfg, target)?;
                out[z * nx * ny..(z + 1) * nx * ny].copy_from_slice(&pred);
                seen[z] = true;
            }
            let missing = seen.iter().filter(|s| !**s).count();
            if missing > 0 {
                return Err(sparsect::Error::IncompleteSet(format!("{missing} of {nz} slices have no sample")).into());
            }
            Ok(VoxelVolume::new(like.shape(), like.spacing(), Unit::Difference, out)?)
        }
        SampleMode::Block3d => {
            let rec = m
                .extraction(cfg.mode)
                .context("no 3d extraction recorded in the manifest")?;
            let grid = plan_grid(
                like.shape(),
                rec.block_size.context("3d extraction without block size")?,
                rec.margin.context("3d extraction without margin")?,
            )?;
            let blocks = samples
                .iter()
                .map(|(_, t)| {
                    Ok(Block {
                        coords: t.block.context("block sample without coordinates")?,
                        size: grid.block_size,
                        values: read_prediction(cfg, t)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(reassemble(blocks, &grid, like.spacing(), Unit::Difference)?)
        }
        _ => unreachable!("patch modes are scored per patch"),
    }
}

fn score_patches(cfg: &ScoreConfig, samples: &[(&ManifestEntry, &ManifestEntry)]) -> Result<(Score, Score)> {
    let p = SsimParams::default();
    let mut acc = [0.0f64; 4];
    for (input, target) in samples {
        let (x, _) = read_tensor(resolve(&cfg.root, &input.path)?)?;
        let (t, _) = read_tensor(resolve(&cfg.root, &target.path)?)?;
        let pred = read_prediction(cfg, target)?;
        let full: Vec<f32> = x.iter().zip(&t).map(|(a, b)| a - b).collect();
        let corrected: Vec<f32> = x.iter().zip(&pred).map(|(a, b)| (a - b).clamp(0.0, 1.0)).collect();
        let (h, w, ch) = (input.shape[0], input.shape[1], input.shape[2]);
        let s = |a: &[f32], b: &[f32]| -> Result<f64> {
            Ok(if ch == 1 {
                ssim(a, b, h, w, &p)?
            } else {
                ssim_multichannel(a, b, h, w, ch, &p)?
            })
        };
        acc[0] += mse(&full, &x)?;
        acc[1] += s(&full, &x)?;
        acc[2] += mse(&full, &corrected)?;
        acc[3] += s(&full, &corrected)?;
    }
    let n = samples.len() as f64;
    Ok((
        Score {
            mse: acc[0] / n,
            ssim: acc[1] / n,
        },
        Score {
            mse: acc[2] / n,
            ssim: acc[3] / n,
        },
    ))
}

fn export_images(
    dir: &Path,
    stem: &str,
    full: &VoxelVolume,
    sparse: &VoxelVolume,
    corrected: &VoxelVolume,
) -> Result<()> {
    let [nx, ny, nz] = full.shape();
    let z = nz / 2;
    let f = full.slice_values(z);
    let diff: Vec<f32> = corrected.slice_values(z).iter().zip(f).map(|(c, f)| c - f).collect();
    for (name, values, lo, hi) in [
        ("full", f, 0.0, 1.0),
        ("sparse", sparse.slice_values(z), 0.0, 1.0),
        ("corrected", corrected.slice_values(z), 0.0, 1.0),
        ("difference", &diff[..], -DIFFERENCE_RANGE, DIFFERENCE_RANGE),
    ] {
        let path = dir.join(format!("{stem}_{name}.pgm"));
        pgm::write_pgm(&path, values, nx, ny, lo, hi)?;
    }
    Ok(())
}

/// Applies predictions to the sparse data of every case in scope and
/// tabulates MSE and SSIM against the full-view reference. Reads the dataset
/// only; writes the table (`.tsv` plus a `.json` sibling) and optional images.
/// Input and target entries of one sample.
type SamplePair<'a> = (&'a ManifestEntry, &'a ManifestEntry);

pub fn cmd_score(cfg: &ScoreConfig) -> Result<ScoreReport> {
    let m = load_manifest(&cfg.root)?;
    m.check_files(&cfg.root)?;
    let pairs = m.sample_pairs()?;
    let mut by_case: BTreeMap<(String, BeamKind, usize), Vec<SamplePair>> = BTreeMap::new();
    for (key, pair) in &pairs {
        if key.mode == cfg.mode && cfg.split.admits(&m, &key.subject) {
            by_case
                .entry((key.subject.clone(), key.geometry, key.views))
                .or_default()
                .push(*pair);
        }
    }
    ensure!(!by_case.is_empty(), "no {} samples in scope", cfg.mode);
    let p = SsimParams::default();
    let mut per_subject: BTreeMap<(String, BeamKind), Vec<MetricRow>> = BTreeMap::new();
    let all_cases = cases(&m)?;
    for ((subject, geometry, views), samples) in &by_case {
        let (sparse_score, corrected_score) = if cfg.mode.is_block_based() && cfg.mode != SampleMode::Block3d {
            score_patches(cfg, samples)?
        } else {
            let case = all_cases
                .iter()
                .find(|c| c.subject == subject && c.geometry == *geometry)
                .with_context(|| format!("no simulated case for {subject}/{geometry}"))?;
            let full = load_entry_volume(&cfg.root, case.full)?;
            let sparse = load_entry_volume(
                &cfg.root,
                case.sparse
                    .get(views)
                    .with_context(|| format!("no {views}-view data for {subject}"))?,
            )?;
            let pred = assemble_prediction(cfg, &m, samples, &full)?;
            let corrected = clip_corrected(&apply_correction(&sparse, &pred)?)?;
            if let Some(dir) = &cfg.export_images {
                export_images(
                    dir,
                    &format!("{subject}_{geometry}_{views}_{}", cfg.mode),
                    &full,
                    &sparse,
                    &corrected,
                )?;
            }
            (score_volume(&full, &sparse, &p)?, score_volume(&full, &corrected, &p)?)
        };
        per_subject
            .entry((subject.clone(), *geometry))
            .or_default()
            .push(MetricRow {
                geometry: *geometry,
                views: *views,
                sparse: sparse_score,
                corrected: corrected_score,
            });
    }
    let method = cfg.mode.to_string();
    let cases: Vec<CaseScore> = per_subject
        .into_iter()
        .map(|((subject, _), rows)| CaseScore {
            subject,
            table: MetricsTable {
                method: method.clone(),
                rows,
            },
        })
        .collect();
    let tables: Vec<MetricsTable> = cases.iter().map(|c| c.table.clone()).collect();
    let report = ScoreReport {
        mode: cfg.mode,
        mean: MetricsTable::mean(&tables)?,
        cases,
    };
    if let Some(parent) = cfg.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&cfg.out, report.mean.to_tsv()).with_context(|| format!("writing {}", cfg.out.display()))?;
    let json_path = cfg.out.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    Ok(report)
}

/// Checks that every file in the manifest exists with the recorded shape.
pub fn cmd_check(root: &Path) -> Result<usize> {
    let m = load_manifest(root)?;
    m.check_files(root)?;
    for e in &m.entries {
        let meta = read_header(resolve(root, &e.path)?)?;
        if e.role == Role::Target && meta.unit != Unit::Difference {
            bail!("target {} has unit {}", e.path, meta.unit);
        }
    }
    Ok(m.entries.len())
}
