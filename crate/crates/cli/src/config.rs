//! Run configuration for `train` and `sample`. TOML, unknown keys rejected;
//! every output records the SHA-256 of the effective configuration.

use std::path::{Path, PathBuf};

use flag_core::checkpoint::Dtype;
use flag_core::spatial::DEFAULT_EDGE_SIGMA;
use flag_core::{AdamWConfig, FlagConfig, JointConfig, Method};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliResult, Failure};

/// Overrides the base directory for relative data paths in config files.
pub const DATA_DIR_ENV: &str = "FLAG_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub optimizer: AdamWConfig,
    pub joint: JointConfig,
    pub flag: FlagConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Flag,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            optimizer: AdamWConfig::default(),
            joint: JointConfig::default(),
            flag: FlagConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training slides; relative paths resolve against the config file.
    pub train: Vec<PathBuf>,
    /// Gene panel written by `select-genes`.
    pub panel: Option<PathBuf>,
    /// Gene embedding matrix (with its `.json` sidecar) for FLAG alignment.
    pub gfm: Option<PathBuf>,
    pub edge_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: Vec::new(), panel: None, gfm: None, edge_sigma: DEFAULT_EDGE_SIGMA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total optimizer steps; a resumed run stops at the same total.
    pub steps: u64,
    /// Periodic checkpoint interval; 0 keeps only the first and last.
    pub checkpoint_every: u64,
    /// Progress echo interval on stderr; the log file gets every step.
    pub log_every: u64,
    pub checkpoint_dtype: Dtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, checkpoint_every: 0, log_every: 100, checkpoint_dtype: Dtype::F32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 100 }
    }
}

impl RunConfig {
    /// Parses `path` and returns the config with the directory that
    /// relative data paths resolve against.
    pub fn load(path: &Path) -> CliResult<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        let cfg = parse_toml(&text, path)?;
        let base = match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => PathBuf::from(dir),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Ok((cfg, base))
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(Failure::Usage(m));
        if self.data.train.is_empty() {
            return usage("data.train lists no slides".into());
        }
        if !(self.data.edge_sigma > 0.0) {
            return usage(format!("data.edge_sigma must be positive, got {}", self.data.edge_sigma));
        }
        if self.sample.steps == 0 {
            return usage("sample.steps must be at least 1".into());
        }
        if !(self.optimizer.lr >= 0.0) {
            return usage(format!("optimizer.lr must be non-negative, got {}", self.optimizer.lr));
        }
        match self.method {
            Method::Flag => {
                self.flag.backbone.validate()?;
                self.flag.dit.validate()?;
            }
            Method::Joint | Method::NodeOnly => self.joint.backbone.validate()?,
        }
        Ok(())
    }

    /// Visual feature width the configured backbone expects.
    pub fn cond_dim(&self) -> usize {
        match self.method {
            Method::Flag => self.flag.backbone.cond_dim,
            Method::Joint | Method::NodeOnly => self.joint.backbone.cond_dim,
        }
    }
}

pub fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> CliResult<T> {
    toml::from_str(text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configs serialize to JSON");
    hex::encode(Sha256::digest(&bytes))
}

/// The effective configuration as TOML, each line prefixed with `# `.
pub fn commented_toml<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).expect("configs serialize to TOML");
    text.lines().map(|l| format!("# {l}\n")).collect()
}
