//! Line-based `key = value` pipeline configuration and its validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const STAGES: &[&str] = &["features", "vad", "embed", "score", "eval"];

const KNOWN_KEYS: &[&str] = &[
    "stages",
    "workdir",
    "wav_list",
    "feature_kind",
    "cmn",
    "dither",
    "vad_engine",
    "vad_threshold",
    "vad_mean_scale",
    "vad_context",
    "unet_weights",
    "extractor_weights",
    "trials",
    "backend",
    "csml_transform",
    "adapt_embeddings",
    "cohort_embeddings",
    "cohort_top",
    "truncate_seconds",
    "ptar",
    "c_miss",
    "c_fa",
    "seed",
];

/// Parsed configuration, preserving the source text for hashing.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub values: BTreeMap<String, String>,
    pub source_text: String,
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Usage(format!(
                    "config line {}: expected `key = value`",
                    lineno + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(PipelineConfig {
            values,
            source_text: text.to_string(),
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_or(&self, key: &str, default: &'static str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Usage(format!("config is missing `{key}`")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let raw = self.require(key)?;
        let p = Path::new(raw);
        Ok(if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) })
    }

    pub fn path_opt(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty() && *v != "none").map(|raw| {
            let p = Path::new(raw);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.base_dir.join(p)
            }
        })
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Usage(format!("config `{key}`: bad number: {e}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Usage(format!("config `{key}`: bad integer: {e}"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Usage(format!("config `{key}`: bad integer: {e}"))),
        }
    }

    pub fn stages(&self) -> Result<Vec<String>> {
        let raw = self.require("stages")?;
        let stages: Vec<String> =
            raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if stages.is_empty() {
            return Err(Error::Usage("config `stages` lists no stages".into()));
        }
        for s in &stages {
            if !STAGES.contains(&s.as_str()) {
                return Err(Error::Usage(format!("unknown stage `{s}`")));
            }
        }
        Ok(stages)
    }
}

/// Report-only validation outcome.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub unknown_keys: Vec<String>,
    pub missing_keys: Vec<String>,
    pub missing_paths: Vec<String>,
    pub incompatibilities: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.unknown_keys.is_empty()
            && self.missing_keys.is_empty()
            && self.missing_paths.is_empty()
            && self.incompatibilities.is_empty()
    }

    pub fn render(&self) -> String {
        if self.is_clean() {
            return String::from("config ok\n");
        }
        let mut out = String::new();
        for k in &self.unknown_keys {
            out.push_str(&format!("unknown key: {k}\n"));
        }
        for k in &self.missing_keys {
            out.push_str(&format!("missing key: {k}\n"));
        }
        for p in &self.missing_paths {
            out.push_str(&format!("missing path: {p}\n"));
        }
        for i in &self.incompatibilities {
            out.push_str(&format!("incompatible: {i}\n"));
        }
        out
    }
}

/// Check keys, referenced paths, and cross-option compatibility without
/// running anything.
pub fn validate_config(config: &PipelineConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    for key in config.values.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            report.unknown_keys.push(key.clone());
        }
    }
    for required in ["stages", "workdir"] {
        if config.get(required).is_none() {
            report.missing_keys.push(required.to_string());
        }
    }
    let stages = match config.stages() {
        Ok(s) => s,
        Err(_) => {
            if config.get("stages").is_some() {
                report.incompatibilities.push("unparsable `stages` list".into());
            }
            Vec::new()
        }
    };
    let has = |s: &str| stages.iter().any(|x| x == s);

    if has("features") || has("vad") {
        if config.get("wav_list").is_none() {
            report.missing_keys.push("wav_list".into());
        } else if let Ok(p) = config.path("wav_list") {
            if !p.exists() {
                report.missing_paths.push(p.display().to_string());
            }
        }
    }
    if has("score") || has("eval") {
        if config.get("trials").is_none() {
            report.missing_keys.push("trials".into());
        } else if let Ok(p) = config.path("trials") {
            if !p.exists() {
                report.missing_paths.push(p.display().to_string());
            }
        }
    }
    if has("embed") {
        if config.get("extractor_weights").is_none() {
            report.missing_keys.push("extractor_weights".into());
        } else if let Ok(p) = config.path("extractor_weights") {
            if !p.exists() {
                report.missing_paths.push(p.display().to_string());
            }
        }
        let kind = config.get_or("feature_kind", "mfb80");
        if kind == "mfcc23" {
            report
                .incompatibilities
                .push("mfcc23 features are for the speech detector, not the extractors".into());
        }
    }
    if config.get_or("vad_engine", "energy") == "unet" && has("vad") {
        match config.path_opt("unet_weights") {
            None => report.missing_keys.push("unet_weights".into()),
            Some(p) => {
                if !p.exists() {
                    report.missing_paths.push(p.display().to_string());
                }
            }
        }
    }
    if config.get_or("backend", "cs") == "csml" && has("score") {
        match config.path_opt("csml_transform") {
            None => report.missing_keys.push("csml_transform".into()),
            Some(p) => {
                if !p.exists() {
                    report.missing_paths.push(p.display().to_string());
                }
            }
        }
    }
    for optional_path in ["adapt_embeddings", "cohort_embeddings"] {
        if let Some(p) = config.path_opt(optional_path) {
            if !p.exists() {
                report.missing_paths.push(p.display().to_string());
            }
        }
    }
    let kind = config.get_or("feature_kind", "mfb80");
    if !["mfb80", "mfcc40", "mfcc23"].contains(&kind.as_str()) {
        report.incompatibilities.push(format!("unknown feature_kind `{kind}`"));
    }
    let cmn = config.get_or("cmn", "both");
    if !["sliding", "global", "both", "none"].contains(&cmn.as_str()) {
        report.incompatibilities.push(format!("unknown cmn mode `{cmn}`"));
    }
    let engine = config.get_or("vad_engine", "energy");
    if !["energy", "unet", "none"].contains(&engine.as_str()) {
        report.incompatibilities.push(format!("unknown vad_engine `{engine}`"));
    }
    let backend = config.get_or("backend", "cs");
    if !["cs", "csml"].contains(&backend.as_str()) {
        report.incompatibilities.push(format!("unknown backend `{backend}`"));
    }
    report
}
