//! Raw tensor files: little-endian f32, row-major, no header. Shapes and
//! dtypes live in the JSON manifest that references the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE_F32: &str = "f32le";

/// Manifest entry describing one tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl TensorRef {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn write_f32(dir: &Path, file: &str, shape: &[usize], data: &[f32]) -> Result<TensorRef> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(file);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(TensorRef { file: file.to_string(), shape: shape.to_vec(), dtype: DTYPE_F32.to_string() })
}

/// Read a tensor, checking dtype and payload length against the manifest entry.
/// `field` names the manifest field in error messages.
pub fn read_f32(dir: &Path, r: &TensorRef, field: &str) -> Result<Vec<f32>> {
    if r.dtype != DTYPE_F32 {
        return Err(Error::format(dir, format!("{field}.dtype: unsupported dtype {:?}", r.dtype)));
    }
    let path = dir.join(&r.file);
    if !path.is_file() {
        return Err(Error::format(&path, format!("{field}.file: tensor file {:?} does not exist", r.file)));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = r.numel() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &path,
            format!("{field}: expected {expected} bytes for shape {:?}, found {}", r.shape, bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, format!("malformed manifest: {e}")))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Fail with a format error unless `found` equals `expected`.
pub fn check_version(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::format(path, format!("version: expected {expected:?}, found {found:?}")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest<A> {
    version: String,
    kind: String,
    arch: A,
    names: Vec<String>,
    shapes: Vec<[usize; 4]>,
    params: TensorRef,
}

pub const CHECKPOINT_VERSION: &str = "v1";

/// Checkpoint directory: `manifest.json` (architecture descriptor, tensor
/// names and shapes) plus one flat `params.f32` holding every tensor in order.
pub fn save_checkpoint<A: Serialize>(
    dir: &Path,
    kind: &str,
    arch: &A,
    params: &crate::nn::ParamStore<f32>,
) -> Result<()> {
    ensure_dir(dir)?;
    let flat: Vec<f32> = params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    let r = write_f32(dir, "params.f32", &[flat.len()], &flat)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION.into(),
        kind: kind.into(),
        arch,
        names: params.names().to_vec(),
        shapes: params.tensors().iter().map(|t| t.shape()).collect(),
        params: r,
    };
    write_json(&manifest_path(dir), &manifest)
}

pub fn load_checkpoint<A: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(A, crate::nn::ParamStore<f32>)> {
    let mpath = manifest_path(dir);
    if !mpath.is_file() {
        return Err(Error::format(&mpath, format!("{kind} checkpoint manifest not found")));
    }
    let m: CheckpointManifest<A> = read_json(&mpath)?;
    check_version(&mpath, &m.version, CHECKPOINT_VERSION)?;
    if m.kind != kind {
        return Err(Error::format(&mpath, format!("kind: expected {kind:?}, found {:?}", m.kind)));
    }
    if m.names.len() != m.shapes.len() {
        return Err(Error::format(&mpath, "names/shapes: length mismatch"));
    }
    let flat = read_f32(dir, &m.params, "params")?;
    let total: usize = m.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total != flat.len() {
        return Err(Error::format(&mpath, format!("shapes: describe {total} values but params holds {}", flat.len())));
    }
    let mut store = crate::nn::ParamStore::new();
    let mut at = 0;
    for (name, shape) in m.names.into_iter().zip(m.shapes) {
        let n: usize = shape.iter().product();
        store.push(name, crate::nn::Tensor::from_vec(shape, flat[at..at + n].to_vec()));
        at += n;
    }
    Ok((m.arch, store))
}
