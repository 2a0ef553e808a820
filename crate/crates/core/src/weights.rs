//! Weight checkpoints: an architecture descriptor, flat parameter tensors and
//! a SHA-256 digest over the parameter bytes.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT: &str = "advpatch-weights";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile<A> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub architecture: A,
    pub digest: String,
    pub tensors: Vec<Vec<f64>>,
}

/// Hex SHA-256 over tensor count, each tensor length and the little-endian
/// bytes of every value.
pub fn digest<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    let tensors: Vec<&[f64]> = tensors.into_iter().collect();
    h.update((tensors.len() as u64).to_le_bytes());
    for t in tensors {
        h.update((t.len() as u64).to_le_bytes());
        for v in t {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn save<A: Serialize>(path: &Path, kind: &str, architecture: &A, tensors: &[&[f64]]) -> Result<()> {
    let file = WeightsFile {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        architecture,
        digest: digest(tensors.iter().copied()),
        tensors: tensors.iter().map(|t| t.to_vec()).collect(),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads and verifies a checkpoint of the given `kind`.
pub fn load<A: DeserializeOwned>(path: &Path, kind: &str) -> Result<(A, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Weights {
        path: path.to_path_buf(),
        reason,
    };
    let file: WeightsFile<A> = serde_json::from_str(&text).map_err(|e| bad(format!("malformed checkpoint: {e}")))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{} (expected {FORMAT} v{VERSION})",
            file.format, file.version
        )));
    }
    if file.kind != kind {
        return Err(bad(format!("checkpoint holds a {}, expected a {kind}", file.kind)));
    }
    let actual = digest(file.tensors.iter().map(|t| t.as_slice()));
    if actual != file.digest {
        return Err(bad(format!(
            "integrity digest mismatch: recorded {}, computed {actual}",
            file.digest
        )));
    }
    Ok((file.architecture, file.tensors))
}
