//! Checkpoint store: a JSON manifest describing every tensor (name, shape,
//! dtype, offset, content hash) plus one raw little-endian float32 blob.
//! Counters and the resolved config ride in the manifest, so a checkpoint
//! is self-describing and a saved state round-trips byte-identically —
//! nothing time- or path-dependent is written.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const BLOB_NAME: &str = "tensors.bin";
const FORMAT: &str = "dicom-checkpoint/1";

/// One tensor's placement inside the blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
    pub sha256: String,
}

/// Training-position counters. The run's RNG streams are derived from
/// (seed, purpose, coordinates), so seed + position is the complete
/// generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub step: u64,
    pub epoch: u64,
    pub adam_t: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub counters: Counters,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn tensor_bytes(t: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for &v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write a checkpoint directory. Tensor order is preserved as given and
/// determines blob layout; names must be unique.
pub fn save_checkpoint(
    dir: &Path,
    counters: Counters,
    config: serde_json::Value,
    tensors: &[(String, &Array2<f32>)],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut seen = BTreeSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        let bytes = tensor_bytes(t);
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            dtype: "float32".into(),
            offset: blob.len() as u64,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest { format: FORMAT.into(), counters, config, tensors: entries };
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let blob_path = dir.join(BLOB_NAME);
    std::fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

/// Read and verify a checkpoint directory. Every tensor's hash and bounds
/// are checked; all problems are reported together.
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, HashMap<String, Array2<f32>>)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?} (expected {FORMAT:?})",
            manifest.format
        )));
    }
    let blob_path = dir.join(BLOB_NAME);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    let mut problems = Vec::new();
    let mut tensors = HashMap::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "float32" {
            problems.push(format!("{}: unsupported dtype {}", entry.name, entry.dtype));
            continue;
        }
        let start = entry.offset as usize;
        let end = start + entry.bytes as usize;
        if end > blob.len() {
            problems.push(format!(
                "{}: blob truncated (needs bytes {start}..{end}, blob has {})",
                entry.name,
                blob.len()
            ));
            continue;
        }
        let slice = &blob[start..end];
        if entry.bytes as usize != entry.shape[0] * entry.shape[1] * 4 {
            problems.push(format!("{}: byte count does not match shape {:?}", entry.name, entry.shape));
            continue;
        }
        if sha256_hex(slice) != entry.sha256 {
            problems.push(format!("{}: content hash mismatch", entry.name));
            continue;
        }
        let mut data = Vec::with_capacity(slice.len() / 4);
        for chunk in slice.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let arr = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
        tensors.insert(entry.name.clone(), arr);
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "corrupt checkpoint at {}:\n  {}",
            dir.display(),
            problems.join("\n  ")
        )));
    }
    Ok((manifest, tensors))
}

/// Assigns loaded tensors into live parameter structs by name, collecting
/// every mismatch (missing tensors, shape disagreements, unclaimed
/// leftovers) instead of stopping at the first.
pub struct Binder {
    map: HashMap<String, Array2<f32>>,
    problems: Vec<String>,
}

impl Binder {
    pub fn new(map: HashMap<String, Array2<f32>>) -> Self {
        Binder { map, problems: Vec::new() }
    }

    /// Move one tensor out by name without shape checking (for tensors
    /// whose shape defines the target, e.g. optimizer moments).
    pub fn take(&mut self, name: &str) -> Option<Array2<f32>> {
        let t = self.map.remove(name);
        if t.is_none() {
            self.problems.push(format!("{name}: missing from checkpoint"));
        }
        t
    }

    /// Assign into an existing tensor, requiring an exact shape match.
    pub fn assign(&mut self, name: &str, dst: &mut Array2<f32>) {
        match self.map.remove(name) {
            None => self.problems.push(format!("{name}: missing from checkpoint")),
            Some(src) => {
                if src.dim() != dst.dim() {
                    self.problems.push(format!(
                        "{name}: shape {:?} in checkpoint, {:?} expected",
                        src.dim(),
                        dst.dim()
                    ));
                } else {
                    *dst = src;
                }
            }
        }
    }

    /// Assign a whole named registry (see `Backbone::named_mut`).
    pub fn assign_registry(&mut self, registry: Vec<(String, &mut Array2<f32>, bool)>) {
        for (name, dst, _) in registry {
            self.assign(&name, dst);
        }
    }

    /// Report all accumulated problems, including tensors nothing claimed.
    pub fn finish(self) -> Result<()> {
        let mut problems = self.problems;
        let mut leftover: Vec<&String> = self.map.keys().collect();
        leftover.sort();
        for name in leftover {
            problems.push(format!("{name}: present in checkpoint but not expected"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("checkpoint incompatible:\n  {}", problems.join("\n  "))))
        }
    }
}
