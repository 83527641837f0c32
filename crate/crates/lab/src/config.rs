//! Run configuration files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use comve_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "COMVE_LAB_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

fn default_vocab_size() -> usize {
    400
}

/// Everything a training run needs. Relative paths are taken relative to
/// the file the config was read from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Target size when the vocabulary is learned from the train split.
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    /// Existing `vocab.txt` (with `merges.txt` beside it) to use instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = crate::io::read_json(path)?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
            .canonicalize()
            .with_context(|| format!("resolving the directory of {}", path.display()))?;
        cfg.data.train = absolute(&base, &cfg.data.train);
        cfg.data.dev = absolute(&base, &cfg.data.dev);
        cfg.data.test = cfg.data.test.map(|t| absolute(&base, &t));
        cfg.out = cfg.out.map(|o| absolute(&base, &o));
        cfg.vocab = cfg.vocab.map(|v| absolute(&base, &v));
        Ok(cfg)
    }
}

/// Seed precedence: explicit flag, then `COMVE_LAB_SEED`, then `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| comve_core::Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")).into()),
        Err(_) => Ok(fallback),
    }
}
