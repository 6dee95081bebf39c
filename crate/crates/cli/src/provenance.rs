//! `provenance.json`: enough to replay a command. No timestamps, so reruns
//! produce identical sidecars.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl InputRecord {
    /// Records the hash of an upstream manifest or index file.
    pub fn new(role: &str, file: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(file).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", file.display())))?;
        Ok(InputRecord { role: role.into(), path: file.display().to_string(), sha256: sha256_hex(&bytes) })
    }
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'a str,
    tool_version: &'a str,
    artifact_versions: serde_json::Value,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    inputs: &'a [InputRecord],
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_provenance(out: &Path, command: &str, config: &RunConfig, inputs: &[InputRecord]) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let p = Provenance {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        artifact_versions: serde_json::json!({
            "cine_bundle": lotseg_core::cinedata::BUNDLE_VERSION,
            "checkpoint": lotseg_core::CHECKPOINT_VERSION,
            "tracker_ensemble": lotseg_core::posterior::ENSEMBLE_VERSION,
            "uncertainty": lotseg_core::posterior::UNCERTAINTY_VERSION,
            "seg_ensemble": lotseg_core::segnet::SEG_ENSEMBLE_VERSION,
            "seg_results": lotseg_core::segnet::RESULTS_VERSION,
        }),
        seed: config.seed,
        config_sha256: sha256_hex(config.canonical_json().as_bytes()),
        config,
        inputs,
    };
    let path = out.join("provenance.json");
    std::fs::write(&path, serde_json::to_string_pretty(&p).expect("serializes") + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}
