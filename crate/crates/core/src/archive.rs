//! Named-tensor archives on disk.
//!
//! Archives are safetensors files: a little-endian `u64` header length, a JSON
//! header mapping each tensor name to dtype, shape and byte range, then the
//! raw little-endian data. Free-form string metadata lives under the header's
//! `__metadata__` key. Writers always emit `F64`; readers also accept `F32`.
//!
//! When the metadata carries a `sha256` entry it is the digest of every
//! tensor (name, shape, data) in name order and is verified on read.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DIGEST_KEY: &str = "sha256";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

pub fn digest(tensors: &BTreeMap<String, Tensor>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct F64View {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl safetensors::View for F64View {
    fn dtype(&self) -> Dtype {
        Dtype::F64
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Serializes to bytes, adding the digest entry.
pub fn to_bytes(archive: &Archive) -> Result<Vec<u8>> {
    let views: Vec<(String, F64View)> = archive
        .tensors
        .iter()
        .map(|(name, t)| {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (
                name.clone(),
                F64View {
                    shape: t.shape().to_vec(),
                    bytes,
                },
            )
        })
        .collect();
    let mut meta: HashMap<String, String> = archive.metadata.clone().into_iter().collect();
    meta.insert(DIGEST_KEY.into(), digest(&archive.tensors));
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Serde(e.to_string()))
}

/// Atomic write: the archive is written beside `path` and renamed into place.
pub fn write(path: &Path, archive: &Archive) -> Result<()> {
    let bytes = to_bytes(archive)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Archive> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt(e.to_string()))?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .map(|m| m.into_iter().collect())
        .unwrap_or_default();
    let st = SafeTensors::deserialize(bytes).map_err(|e| corrupt(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.iter() {
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            // Integer bookkeeping tensors (e.g. batch counters) carry no weights.
            Dtype::I64 | Dtype::I32 => continue,
            other => return Err(corrupt(format!("tensor `{name}` has unsupported dtype {other:?}"))),
        };
        let shape = if view.shape().is_empty() { vec![1] } else { view.shape().to_vec() };
        let t = Tensor::from_vec(shape, data).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
        tensors.insert(name.to_string(), t);
    }
    if let Some(expected) = metadata.get(DIGEST_KEY) {
        let actual = digest(&tensors);
        if &actual != expected {
            return Err(corrupt(format!("digest mismatch (stored {expected}, computed {actual})")));
        }
    }
    Ok(Archive { tensors, metadata })
}

pub fn read(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
