//! Line-delimited report records: one JSON object per line, streamed in
//! deterministic order. Everything except `wall_time_ms` is a pure function
//! of the configuration.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use lca_core::Matrix;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One report line.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRecord {
    pub tool_version: String,
    pub mode: String,
    pub seed: u64,
    /// Echo of the resolved configuration relevant to the mode.
    pub config: Value,
    /// Mode-specific results.
    pub payload: Value,
    pub wall_time_ms: u128,
}

impl ReportRecord {
    /// The deterministic portion: everything except wall time and version.
    pub fn deterministic_bytes(&self) -> Vec<u8> {
        let det = serde_json::json!({
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "payload": self.payload,
        });
        det.to_string().into_bytes()
    }
}

/// SHA-256 over the matrix's row-major little-endian f64 bytes.
pub fn matrix_digest(m: &Matrix) -> String {
    let mut hasher = Sha256::new();
    for v in m.data() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// SHA-256 over a flat f64 slice, little-endian.
pub fn slice_digest(data: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in data {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Resolves the report path: explicit `--out` wins, then `$LCA_OUT_DIR`,
/// then `./out`, with the mode name as the file stem.
pub fn report_path(out_flag: Option<&Path>, out_dir: &Path, mode_name: &str) -> PathBuf {
    if let Some(p) = out_flag {
        return p.to_path_buf();
    }
    let dir = std::env::var_os("LCA_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.to_path_buf());
    dir.join(format!("{mode_name}.jsonl"))
}

/// Writes records as one JSON object per line.
pub fn write_jsonl(path: &Path, records: &[ReportRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("cannot create report {}", path.display()))?;
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}
