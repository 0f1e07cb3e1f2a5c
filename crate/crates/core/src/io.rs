//! The `SPCT0001` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "SPCT0001"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          payload: product(shape) f32 values, row-major
//! ```
//!
//! Volumes are written with shape `[nz, ny, nx]`, which is row-major for the
//! x-fastest in-memory order. Their voxel spacing travels in the provenance
//! object under `spacing_mm` as `[sx, sy, sz]`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{invalid, Error, Result};
use crate::types::{Unit, VoxelVolume};

pub const MAGIC: &[u8; 8] = b"SPCT0001";
pub const DTYPE: &str = "f32";
pub const LAYOUT: &str = "row-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub layout: String,
    pub unit: Unit,
    #[serde(default)]
    pub provenance: Map<String, Value>,
}

impl TensorMeta {
    pub fn new(shape: Vec<usize>, unit: Unit) -> Self {
        Self {
            dtype: DTYPE.into(),
            shape,
            layout: LAYOUT.into(),
            unit,
            provenance: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.provenance.insert(key.into(), value.into());
        self
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.element_count() * 4
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn corruption(path: &Path, msg: impl Into<String>) -> Error {
    Error::Corruption {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes `values` with the given metadata. Parent directories are created.
pub fn write_tensor(path: impl AsRef<Path>, values: &[f32], meta: &TensorMeta) -> Result<()> {
    let path = path.as_ref();
    if meta.shape.is_empty() || meta.shape.contains(&0) {
        return Err(invalid(format!("tensor shape {:?} must be nonempty", meta.shape)));
    }
    if meta.dtype != DTYPE || meta.layout != LAYOUT {
        return Err(invalid(format!(
            "unsupported dtype/layout {}/{}",
            meta.dtype, meta.layout
        )));
    }
    if meta.element_count() != values.len() {
        return Err(Error::ShapeMismatch {
            expected: meta.shape.clone(),
            found: vec![values.len()],
        });
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let header = serde_json::to_vec(meta).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut payload = Vec::with_capacity(values.len() * 4);
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(MAGIC)
        .and_then(|_| w.write_all(&(header.len() as u64).to_le_bytes()))
        .and_then(|_| w.write_all(&header))
        .and_then(|_| w.write_all(&payload))
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

/// Reads only the header of a container.
pub fn read_header(path: impl AsRef<Path>) -> Result<TensorMeta> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(io_err(path))?;
    read_header_from(path, &mut f)
}

fn read_header_from(path: &Path, f: &mut File) -> Result<TensorMeta> {
    let mut magic = [0u8; 8];
    read_fully(path, f, &mut magic, |_| {
        format_err(path, "file shorter than the magic tag")
    })?;
    if &magic != MAGIC {
        return Err(format_err(
            path,
            format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        ));
    }
    let mut len = [0u8; 8];
    read_fully(path, f, &mut len, |_| corruption(path, "truncated header length"))?;
    let len = u64::from_le_bytes(len);
    let file_len = f.metadata().map_err(io_err(path))?.len();
    if len > file_len.saturating_sub(16) {
        return Err(corruption(
            path,
            format!("header length {len} exceeds file size {file_len}"),
        ));
    }
    let mut header = vec![0u8; len as usize];
    read_fully(path, f, &mut header, |_| corruption(path, "truncated header"))?;
    let meta: TensorMeta =
        serde_json::from_slice(&header).map_err(|e| format_err(path, format!("malformed header: {e}")))?;
    if meta.dtype != DTYPE {
        return Err(format_err(path, format!("unsupported dtype '{}'", meta.dtype)));
    }
    if meta.layout != LAYOUT {
        return Err(format_err(path, format!("unsupported layout '{}'", meta.layout)));
    }
    if meta.shape.is_empty() {
        return Err(format_err(path, "empty shape"));
    }
    Ok(meta)
}

fn read_fully(path: &Path, f: &mut File, buf: &mut [u8], short: impl FnOnce(()) -> Error) -> Result<()> {
    match f.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(short(())),
        Err(e) => Err(io_err(path)(e)),
    }
}

/// Reads a container, checking that the payload length matches the shape.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<f32>, TensorMeta)> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(io_err(path))?;
    let meta = read_header_from(path, &mut f)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(io_err(path))?;
    let want = meta.payload_bytes();
    if payload.len() < want {
        return Err(corruption(
            path,
            format!("truncated payload: {} of {want} bytes", payload.len()),
        ));
    }
    if payload.len() > want {
        return Err(corruption(
            path,
            format!("{} trailing bytes after payload", payload.len() - want),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((values, meta))
}

/// Writes a volume as a `[nz, ny, nx]` tensor with its spacing in the provenance.
pub fn write_volume(path: impl AsRef<Path>, vol: &VoxelVolume, provenance: Map<String, Value>) -> Result<()> {
    let [nx, ny, nz] = vol.shape();
    let mut meta = TensorMeta::new(vec![nz, ny, nx], vol.unit());
    meta.provenance = provenance;
    meta.provenance
        .insert("spacing_mm".into(), serde_json::json!(vol.spacing()));
    write_tensor(path, vol.values(), &meta)
}

/// Reads a volume written by [`write_volume`]. Missing spacing defaults to 1 mm.
pub fn read_volume(path: impl AsRef<Path>) -> Result<(VoxelVolume, TensorMeta)> {
    let path = path.as_ref();
    let (values, meta) = read_tensor(path)?;
    if meta.shape.len() != 3 {
        return Err(format_err(
            path,
            format!("expected a 3D tensor, found shape {:?}", meta.shape),
        ));
    }
    let spacing = match meta.provenance.get("spacing_mm") {
        Some(v) => serde_json::from_value::<[f64; 3]>(v.clone())
            .map_err(|e| format_err(path, format!("bad spacing_mm: {e}")))?,
        None => [1.0; 3],
    };
    let shape = [meta.shape[2], meta.shape[1], meta.shape[0]];
    let vol = VoxelVolume::new(shape, spacing, meta.unit, values)?;
    Ok((vol, meta))
}

/// Path of `rel` under `root`, rejecting absolute paths and `..` components.
pub fn resolve(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(invalid(format!("path '{rel}' must be relative to the dataset root")));
    }
    Ok(root.join(p))
}
