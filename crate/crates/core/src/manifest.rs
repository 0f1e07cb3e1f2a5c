//! Dataset manifest: subject splits and the index of every persisted tensor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{read_header, resolve};
use crate::types::BeamKind;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "input-2d")]
    Input2d,
    #[serde(rename = "input-2d3ch")]
    Input2d3ch,
    #[serde(rename = "input-25d")]
    Input25d,
    #[serde(rename = "input-3d")]
    Input3d,
    #[serde(rename = "input-patch")]
    InputPatch,
    #[serde(rename = "target")]
    Target,
    #[serde(rename = "sparse")]
    Sparse,
    #[serde(rename = "full")]
    Full,
}

impl Role {
    pub fn is_input(self) -> bool {
        matches!(
            self,
            Role::Input2d | Role::Input2d3ch | Role::Input25d | Role::Input3d | Role::InputPatch
        )
    }
}

/// How training samples are cut from a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleMode {
    #[serde(rename = "2d")]
    Slice2d,
    #[serde(rename = "2d3ch")]
    Slice2d3ch,
    #[serde(rename = "25d")]
    Block25d,
    #[serde(rename = "3d")]
    Block3d,
    #[serde(rename = "patch-axial")]
    PatchAxial,
    #[serde(rename = "patch-coronal")]
    PatchCoronal,
    #[serde(rename = "patch-sagittal")]
    PatchSagittal,
}

impl SampleMode {
    pub const ALL: [SampleMode; 7] = [
        SampleMode::Slice2d,
        SampleMode::Slice2d3ch,
        SampleMode::Block25d,
        SampleMode::Block3d,
        SampleMode::PatchAxial,
        SampleMode::PatchCoronal,
        SampleMode::PatchSagittal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::Slice2d => "2d",
            SampleMode::Slice2d3ch => "2d3ch",
            SampleMode::Block25d => "25d",
            SampleMode::Block3d => "3d",
            SampleMode::PatchAxial => "patch-axial",
            SampleMode::PatchCoronal => "patch-coronal",
            SampleMode::PatchSagittal => "patch-sagittal",
        }
    }

    pub fn input_role(self) -> Role {
        match self {
            SampleMode::Slice2d => Role::Input2d,
            SampleMode::Slice2d3ch => Role::Input2d3ch,
            SampleMode::Block25d => Role::Input25d,
            SampleMode::Block3d => Role::Input3d,
            _ => Role::InputPatch,
        }
    }

    /// Whether samples come from the block grid rather than whole slices.
    pub fn is_block_based(self) -> bool {
        !matches!(self, SampleMode::Slice2d | SampleMode::Slice2d3ch)
    }

    /// Tensor shape of one input sample for a volume `[nx, ny, nz]` and block size.
    pub fn sample_shape(self, volume: [usize; 3], block_size: usize) -> Vec<usize> {
        let [nx, ny, _] = volume;
        let b = block_size;
        match self {
            SampleMode::Slice2d => vec![ny, nx, 1],
            SampleMode::Slice2d3ch => vec![ny, nx, 3],
            SampleMode::Block25d => vec![b, b, 3],
            SampleMode::Block3d => vec![b, b, b],
            _ => vec![b, b, 1],
        }
    }

    /// Tensor shape of the matching target. Neighbour stacks pair with the
    /// central slice's artifact only.
    pub fn target_shape(self, volume: [usize; 3], block_size: usize) -> Vec<usize> {
        match self {
            SampleMode::Slice2d3ch => SampleMode::Slice2d.sample_shape(volume, block_size),
            _ => self.sample_shape(volume, block_size),
        }
    }
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SampleMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown sample mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub geometry: BeamKind,
    pub views: usize,
    /// Window as `WIDTHxLEVEL`.
    pub window: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SampleMode>,
    /// Sample number within (subject, geometry, views, mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    /// Axial slice index for slice-based modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    /// Block grid coordinates for block-based modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<[usize; 3]>,
    /// Path relative to the dataset root.
    pub path: String,
    pub shape: Vec<usize>,
}

impl ManifestEntry {
    /// Key shared by an input sample and its target.
    pub fn sample_key(&self) -> Option<SampleKey> {
        Some(SampleKey {
            subject: self.subject.clone(),
            geometry: self.geometry,
            views: self.views,
            mode: self.mode?,
            sample: self.sample?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleKey {
    pub subject: String,
    pub geometry: BeamKind,
    pub views: usize,
    pub mode: SampleMode,
    pub sample: usize,
}

/// Block parameters used for one extraction mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub mode: SampleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default)]
    pub subjects: Vec<SubjectEntry>,
    #[serde(default)]
    pub extractions: Vec<ExtractionRecord>,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION,
            subjects: Vec::new(),
            extractions: Vec::new(),
            entries: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported manifest version {}", m.version),
            });
        }
        m.validate()?;
        Ok(m)
    }

    /// Loads `root/manifest.json`, or returns an empty manifest if absent.
    pub fn load_or_default(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn subject_split(&self, id: &str) -> Option<Split> {
        self.subjects.iter().find(|s| s.id == id).and_then(|s| s.split)
    }

    /// Adds a subject (without a split) if not yet listed.
    pub fn ensure_subject(&mut self, id: &str) {
        if !self.subjects.iter().any(|s| s.id == id) {
            self.subjects.push(SubjectEntry {
                id: id.to_string(),
                split: None,
            });
            self.subjects.sort_by(|a, b| a.id.cmp(&b.id));
        }
    }

    /// Inserts an entry, replacing any entry with the same path.
    pub fn upsert(&mut self, entry: ManifestEntry) {
        match self.entries.iter_mut().find(|e| e.path == entry.path) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn extraction(&self, mode: SampleMode) -> Option<&ExtractionRecord> {
        self.extractions.iter().find(|e| e.mode == mode)
    }

    pub fn set_extraction(&mut self, record: ExtractionRecord) {
        self.extractions.retain(|e| e.mode != record.mode);
        self.extractions.push(record);
        self.extractions.sort_by_key(|e| e.mode);
    }

    /// Applies a split assignment to the listed subjects.
    pub fn apply_splits(&mut self, splits: &BTreeMap<String, Split>) -> Result<()> {
        for s in &mut self.subjects {
            s.split = Some(
                *splits
                    .get(&s.id)
                    .ok_or_else(|| invalid(format!("no split assigned to subject '{}'", s.id)))?,
            );
        }
        Ok(())
    }

    /// Input/target pairs keyed by sample, checked for completeness.
    pub fn sample_pairs(&self) -> Result<BTreeMap<SampleKey, (&ManifestEntry, &ManifestEntry)>> {
        let mut inputs = BTreeMap::new();
        let mut targets = BTreeMap::new();
        for e in &self.entries {
            let Some(key) = e.sample_key() else { continue };
            let slot = if e.role.is_input() {
                &mut inputs
            } else if e.role == Role::Target {
                &mut targets
            } else {
                return Err(invalid(format!("sample entry '{}' has role {:?}", e.path, e.role)));
            };
            if slot.insert(key, e).is_some() {
                return Err(invalid(format!("duplicate sample entry '{}'", e.path)));
            }
        }
        let mut pairs = BTreeMap::new();
        for (key, input) in inputs {
            let target = targets
                .remove(&key)
                .ok_or_else(|| Error::IncompleteSet(format!("no target for sample '{}'", input.path)))?;
            pairs.insert(key, (input, target));
        }
        if let Some((_, t)) = targets.into_iter().next() {
            return Err(Error::IncompleteSet(format!("target '{}' has no input", t.path)));
        }
        Ok(pairs)
    }

    /// Structural checks that need no file access: unique subjects, every entry
    /// referring to a listed subject, unique paths, and input/target pairs with
    /// consistent shapes.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            if !ids.insert(s.id.as_str()) {
                return Err(invalid(format!("subject '{}' listed twice", s.id)));
            }
        }
        let mut paths = BTreeSet::new();
        for e in &self.entries {
            if !ids.contains(e.subject.as_str()) {
                return Err(invalid(format!(
                    "entry '{}' refers to unknown subject '{}'",
                    e.path, e.subject
                )));
            }
            if !paths.insert(e.path.as_str()) {
                return Err(invalid(format!("path '{}' listed twice", e.path)));
            }
            if let Some(mode) = e.mode {
                if e.role.is_input() && e.role != mode.input_role() {
                    return Err(invalid(format!(
                        "entry '{}' has role {:?} for mode {mode}",
                        e.path, e.role
                    )));
                }
            }
        }
        for (input, target) in self.sample_pairs()?.values() {
            let mut expected = input.shape.clone();
            if input.mode == Some(SampleMode::Slice2d3ch) {
                if let Some(ch) = expected.last_mut() {
                    *ch = 1;
                }
            }
            if expected != target.shape {
                return Err(Error::ShapeMismatch {
                    expected,
                    found: target.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Verifies that every referenced file exists under `root` and that its
    /// header shape matches the entry.
    pub fn check_files(&self, root: &Path) -> Result<()> {
        for e in &self.entries {
            let path = resolve(root, &e.path)?;
            let meta = read_header(&path)?;
            if meta.shape != e.shape {
                return Err(Error::ShapeMismatch {
                    expected: e.shape.clone(),
                    found: meta.shape,
                });
            }
        }
        Ok(())
    }
}

/// Split sizes for `n` subjects: validation `round(0.1 n)`, test
/// `floor(0.4 n)`, each at least one, train the rest.
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(invalid(format!("at least 3 subjects are needed for a split, got {n}")));
    }
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    let test = ((n as f64 * 0.4).floor() as usize).max(1);
    Ok((n - val - test, val, test))
}

/// Deterministic subject-level split for a seed. Ids are sorted before
/// shuffling, so the input order does not matter.
pub fn assign_splits(subject_ids: &[String], seed: u64) -> Result<BTreeMap<String, Split>> {
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != subject_ids.len() {
        return Err(invalid("duplicate subject ids"));
    }
    let (train, val, _) = split_counts(ids.len())?;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Validation
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect())
}

/// Manifest listing `subject_ids` with their assigned splits and no entries.
pub fn manifest_skeleton(subject_ids: &[String], seed: u64) -> Result<DatasetManifest> {
    let splits = assign_splits(subject_ids, seed)?;
    Ok(DatasetManifest {
        subjects: splits
            .into_iter()
            .map(|(id, split)| SubjectEntry { id, split: Some(split) })
            .collect(),
        ..DatasetManifest::default()
    })
}
