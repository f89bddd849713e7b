//! Run manifests: configuration echo, seed and content hashes of inputs and outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf], strip: Option<&Path>) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            let shown = strip.and_then(|d| p.strip_prefix(d).ok()).unwrap_or(p);
            Ok(FileDigest { path: shown.display().to_string(), sha256: sha256_file(p)? })
        })
        .collect()
}

/// Writes `manifest.json` into `out_dir`. Output paths are recorded relative to it.
pub fn write(
    out_dir: &Path,
    config: &serde_json::Value,
    seed: Option<u64>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let m = Manifest {
        tool: "tvcgmm",
        version: env!("CARGO_PKG_VERSION"),
        config,
        seed,
        inputs: digests(inputs, None)?,
        outputs: digests(outputs, Some(out_dir))?,
    };
    let text = serde_json::to_string_pretty(&m)?;
    fs::write(out_dir.join(MANIFEST_FILE), text + "\n").context("writing manifest")?;
    Ok(())
}
