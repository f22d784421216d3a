//! On-disk envelopes. Every artifact carries its schema, seed and the hash of
//! the calibration profile it was produced under.

use std::fs;
use std::path::{Path, PathBuf};

use lorapack_core::workload::WorkloadSpec;
use lorapack_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const METRICS_SCHEMA: &str = "lorapack-metrics v1";
pub const SWEEP_SCHEMA: &str = "lorapack-sweep v1";
pub const CHECK_SCHEMA: &str = "lorapack-check v1";
pub const FIT_REPORT_SCHEMA: &str = "lorapack-fit-report v1";
pub const PLACEMENTS_SCHEMA: &str = "lorapack-placements v1";
pub const REPORT_SCHEMA: &str = "lorapack-report v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema: String,
    pub seed: u64,
    pub profile_hash: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(schema: &str, seed: u64, profile_hash: &str, body: T) -> Self {
        Self {
            schema: schema.into(),
            seed,
            profile_hash: profile_hash.into(),
            body,
        }
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_envelope<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Envelope<T>> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    match v.get("schema").and_then(|s| s.as_str()) {
        Some(s) if s == schema => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "{}: expected schema {schema:?}, found {other:?}",
                path.display()
            )))
        }
    }
    Ok(serde_json::from_value(v)?)
}

/// TOML or JSON, picked by extension.
pub fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

pub fn read_workload(path: &Path) -> Result<WorkloadSpec> {
    let w: WorkloadSpec = read_structured(path)?;
    w.validate()?;
    Ok(w)
}

pub fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

/// Hex digest of a stage's inputs; a stage is skipped when its recorded
/// stamp matches and its outputs exist.
pub fn stamp<T: Serialize>(inputs: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(inputs)?)))
}

pub struct Stamps {
    dir: PathBuf,
}

impl Stamps {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            dir: out_dir.join(".stamps"),
        }
    }

    pub fn fresh(&self, stage: &str, value: &str, outputs: &[PathBuf]) -> bool {
        fs::read_to_string(self.dir.join(stage)).is_ok_and(|s| s.trim() == value)
            && outputs.iter().all(|p| p.exists())
    }

    pub fn record(&self, stage: &str, value: &str) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        fs::write(self.dir.join(stage), format!("{value}\n"))?;
        Ok(())
    }
}
