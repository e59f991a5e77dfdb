//! Pipeline manifest: records the config hash and per-stage artifact
//! hashes so repeated runs can skip stages whose outputs are current.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageRecord {
    /// Artifact paths relative to the workdir, with content hashes.
    pub artifacts: Vec<(String, String)>,
    /// "ok" or "partial" when a stage failed midway.
    pub status: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn new(config_hash: &str) -> Self {
        Manifest {
            version: TOOLKIT_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            stages: BTreeMap::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("version = {}\n", self.version));
        out.push_str(&format!("config_sha256 = {}\n", self.config_hash));
        for (stage, record) in &self.stages {
            out.push_str(&format!("stage = {} {}\n", stage, record.status));
            for (path, hash) in &record.artifacts {
                out.push_str(&format!("artifact = {stage} {path} {hash}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut manifest = Manifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::data(path, format!("line {}: not key = value", lineno + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "version" => manifest.version = value.to_string(),
                "config_sha256" => manifest.config_hash = value.to_string(),
                "stage" => {
                    let mut parts = value.split_whitespace();
                    let (Some(name), Some(status)) = (parts.next(), parts.next()) else {
                        return Err(Error::data(path, format!("line {}: bad stage", lineno + 1)));
                    };
                    manifest
                        .stages
                        .insert(name.to_string(), StageRecord { artifacts: vec![], status: status.to_string() });
                }
                "artifact" => {
                    let fields: Vec<&str> = value.split_whitespace().collect();
                    if fields.len() != 3 {
                        return Err(Error::data(path, format!("line {}: bad artifact", lineno + 1)));
                    }
                    manifest
                        .stages
                        .entry(fields[0].to_string())
                        .or_default()
                        .artifacts
                        .push((fields[1].to_string(), fields[2].to_string()));
                }
                other => {
                    return Err(Error::data(path, format!("line {}: unknown key {other}", lineno + 1)))
                }
            }
        }
        Ok(manifest)
    }

    pub fn load(workdir: &Path) -> Result<Option<Self>> {
        let path = workdir.join(MANIFEST_NAME);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(Self::parse(&text, &path)?))
    }

    pub fn save(&self, workdir: &Path) -> Result<()> {
        let path = workdir.join(MANIFEST_NAME);
        std::fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }

    /// A stage is current when it completed under the same config and
    /// every artifact still exists with a matching hash.
    pub fn stage_is_current(&self, stage: &str, config_hash: &str, workdir: &Path) -> bool {
        if self.config_hash != config_hash {
            return false;
        }
        let Some(record) = self.stages.get(stage) else { return false };
        if record.status != "ok" {
            return false;
        }
        record.artifacts.iter().all(|(rel, hash)| {
            let path = workdir.join(rel);
            matches!(hash_file(&path), Ok(h) if &h == hash)
        })
    }

    pub fn record_stage(&mut self, stage: &str, workdir: &Path, rel_paths: &[PathBuf]) -> Result<()> {
        let mut artifacts = Vec::with_capacity(rel_paths.len());
        for rel in rel_paths {
            let hash = hash_file(&workdir.join(rel))?;
            artifacts.push((rel.display().to_string(), hash));
        }
        self.stages
            .insert(stage.to_string(), StageRecord { artifacts, status: "ok".to_string() });
        Ok(())
    }

    pub fn record_partial(&mut self, stage: &str) {
        self.stages
            .insert(stage.to_string(), StageRecord { artifacts: vec![], status: "partial".to_string() });
    }
}
