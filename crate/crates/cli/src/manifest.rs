//! `manifest.json` in the run directory: the config hash and a SHA-256
//! digest of every artifact present.

use std::collections::BTreeMap;
use std::fs;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, Loaded};
use crate::pipeline::{
    CHECKPOINT, CODEBOOK, CORPUS, DETAILS, DOCUMENTS, LOSS, REPORT, REPORT_JSON, SENTENCES, SEQUENCES,
};

pub const MANIFEST: &str = "manifest.json";

pub const ARTIFACTS: [&str; 10] = [
    CORPUS, SENTENCES, CODEBOOK, SEQUENCES, CHECKPOINT, LOSS, DOCUMENTS, REPORT, REPORT_JSON, DETAILS,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub files: BTreeMap<String, String>,
}

pub fn digest_file(path: &std::path::Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex(&Sha256::digest(bytes)))
}

pub fn build(cfg: &Loaded) -> Result<Manifest> {
    let mut files = BTreeMap::new();
    for name in ARTIFACTS {
        let p = cfg.artifact(name);
        if p.exists() {
            files.insert(name.to_string(), digest_file(&p)?);
        }
    }
    Ok(Manifest {
        config_hash: cfg.config.hash(),
        config: serde_json::to_value(&cfg.config)?,
        files,
    })
}

pub fn update(cfg: &Loaded) -> Result<()> {
    let m = build(cfg)?;
    let path = cfg.artifact(MANIFEST);
    fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&m)?))
        .with_context(|| format!("cannot write {}", path.display()))
}
