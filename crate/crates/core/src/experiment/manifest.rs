//! Run manifest: config echo, content hashes, protocol choices, artifacts.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::train::{CHECKPOINT_DIR, EVAL_FILE, METRICS_FILE};
use crate::data::{Dataset, DatasetManifest};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Choices the run depends on that the method leaves open.
pub const PROTOCOL: [(&str, &str); 6] = [
    ("nn_probe", "1-nearest neighbour by cosine similarity; test split against train split"),
    ("features", "class token after the final norm of the query backbone, uncompressed at the base patch, no augmentation"),
    ("linear_probe", "multinomial logistic regression on standardized features, L2, L-BFGS from zero to gradient norm 1e-6 or 5000 iterations"),
    ("optimizer", "AdamW, decoupled decay on matrix weights only"),
    ("momentum", "key encoder momentum ramps from ema.start to ema.end by a half cosine over the budget"),
    ("lr", "linear warmup then decay, positions measured in spent budget units"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub status: String,
    pub config: serde_json::Value,
    /// SHA-256 of the TOML config echo.
    pub config_sha256: String,
    pub train_data: DatasetManifest,
    pub test_data: DatasetManifest,
    pub protocol: Vec<(String, String)>,
    pub artifacts: Vec<PathBuf>,
    pub started_unix: u64,
    pub wall_clock_secs: Option<f64>,
    pub steps: Option<u64>,
    pub spent_units: Option<f64>,
    pub resumed_from: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Self> {
        let toml = cfg.to_toml()?;
        let mut artifacts = vec![PathBuf::from(CONFIG_FILE), PathBuf::from(METRICS_FILE), PathBuf::from(EVAL_FILE)];
        artifacts.extend(cfg.stages.iter().map(|&s| Path::new(CHECKPOINT_DIR).join(super::train::stage_dir_name(s))));
        Ok(Self {
            tool: "seqcomp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            status: "running".into(),
            config: serde_json::to_value(cfg)?,
            config_sha256: hex(&Sha256::digest(toml.as_bytes())),
            train_data: train.manifest(),
            test_data: test.manifest(),
            protocol: PROTOCOL.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            artifacts,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_secs: None,
            steps: None,
            spent_units: None,
            resumed_from: None,
        })
    }

    pub fn finish(&mut self, secs: f64, steps: u64, spent: f64) {
        self.status = "complete".into();
        self.wall_clock_secs = Some(secs);
        self.steps = Some(steps);
        self.spent_units = Some(spent);
    }

    /// Writes the manifest and the config echo into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let cfg: RunConfig = serde_json::from_value(self.config.clone())?;
        let cpath = dir.join(CONFIG_FILE);
        std::fs::write(&cpath, cfg.to_toml()?).map_err(|e| Error::io(&cpath, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        std::fs::write(&mpath, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&mpath, e))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
