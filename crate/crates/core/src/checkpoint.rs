//! Checkpoints: a JSON manifest plus a little-endian binary blob.
//!
//! The manifest lists `{name, shape, dtype, byte_offset}` for each stored
//! tensor in blob order. Parameters come first, followed by their momentum
//! buffers under `momentum/<name>`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub blob: String,
    /// Optimizer steps completed when the checkpoint was written.
    pub step: u64,
    /// Resolved run configuration (`key = value` text).
    pub config: String,
    pub entries: Vec<ManifestEntry>,
}

fn entry(name: String, t: &Tensor<impl Scalar>, dtype: DType, offset: &mut u64) -> ManifestEntry {
    let e = ManifestEntry {
        name,
        shape: t.shape().to_vec(),
        dtype: dtype.name().to_string(),
        byte_offset: *offset,
    };
    *offset += (t.len() * dtype.size_of()) as u64;
    e
}

/// Writes `manifest.json` and `weights.bin` into `dir` (created if needed).
pub fn save<T: Scalar>(dir: &Path, store: &ParamStore<T>, step: u64, config: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for p in store.iter() {
        entries.push(entry(p.name.clone(), &p.value, T::DTYPE, &mut offset));
        p.value.data().iter().for_each(|v| v.write_le(&mut blob));
    }
    for p in store.iter() {
        entries.push(entry(format!("{MOMENTUM_PREFIX}{}", p.name), &p.momentum, T::DTYPE, &mut offset));
        p.momentum.data().iter().for_each(|v| v.write_le(&mut blob));
    }
    let manifest = Manifest {
        blob: BLOB_FILE.to_string(),
        step,
        config: config.to_string(),
        entries,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(format!("writing {}", blob_path.display()), e))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

/// Accepts either the manifest path or the directory holding it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads values (and momentum buffers when present) into a store whose
/// parameter names and shapes must match the manifest. Stored values of a
/// different float width are converted.
pub fn load_into<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(format!("reading {}", blob_path.display()), e))?;

    let mut seen = vec![false; store.len()];
    for e in &manifest.entries {
        let dtype = DType::parse(&e.dtype).ok_or_else(|| Error::Checkpoint(format!("unknown dtype `{}` for `{}`", e.dtype, e.name)))?;
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + n * dtype.size_of();
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("`{}` extends past the end of the blob", e.name)))?;
        let values: Vec<T> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| T::from_f64c(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::from_f64c(f64::read_le(c))).collect(),
        };
        let (name, is_momentum) = match e.name.strip_prefix(MOMENTUM_PREFIX) {
            Some(n) => (n, true),
            None => (e.name.as_str(), false),
        };
        let id = store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let p = store.get_mut(id);
        if p.value.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape of `{name}`: model {:?}, checkpoint {:?}",
                p.value.shape(),
                e.shape
            )));
        }
        let t = Tensor::new(&e.shape, values)?;
        if is_momentum {
            p.momentum = t;
        } else {
            p.value = t;
            seen[id.index()] = true;
        }
    }
    if let Some(missing) = store.iter().zip(&seen).find(|(_, s)| !**s) {
        return Err(Error::Checkpoint(format!("parameter `{}` missing from checkpoint", missing.0.name)));
    }
    Ok(manifest)
}
