//! Model checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IMSE"
//! 4       4     format version, u32 LE
//! 8       4     config length L, u32 LE
//! 12      L     model config, UTF-8 JSON
//! 12+L    8     weight count W, u64 LE
//! 20+L    8W    weights, f64 LE, in model layout order
//! ```
//!
//! Files with any other version are refused rather than migrated.

use std::path::Path;

use imse_core::model::{Model, ModelConfig};

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"IMSE";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(model.config())?;
    let params = model.params();
    let mut out = Vec::with_capacity(20 + cfg.len() + 8 * params.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for w in params {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

/// `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let corrupt = |reason: String| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut pos = 0;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let end = pos + n;
        let s = bytes
            .get(pos..end)
            .ok_or_else(|| corrupt(format!("truncated while reading {what} at byte {pos}")))?;
        pos = end;
        Ok(s)
    };
    if take(4, "magic")? != MAGIC {
        return Err(corrupt("missing IMSE magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(CliError::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let cfg_len = u32::from_le_bytes(take(4, "config length")?.try_into().unwrap()) as usize;
    let cfg: ModelConfig =
        serde_json::from_slice(take(cfg_len, "config")?).map_err(|e| corrupt(format!("config block: {e}")))?;
    let count = u64::from_le_bytes(take(8, "weight count")?.try_into().unwrap()) as usize;
    let blob = take(count.checked_mul(8).ok_or_else(|| corrupt("weight count overflows".into()))?, "weights")?;
    let params: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Model::from_params(cfg, params).map_err(|e| corrupt(e.to_string()))
}

pub fn save(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes, path)
}
