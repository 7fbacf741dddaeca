//! Declarative run configuration and run-directory plumbing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use looplab_core::trainer::TrainConfig;

/// Environment variable overriding the run-root directory.
pub const RUN_ROOT_ENV: &str = "LOOPLAB_RUN_ROOT";

/// Top-level TOML config for `looplab train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Path to the training corpus (raw bytes).
    pub corpus: PathBuf,
    /// Run directory name; derived from the config hash when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_name: Option<String>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Canonical serialized echo (what gets written into the run dir).
    pub fn echo(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Stable name derived from the canonical config text.
    pub fn derived_name(&self) -> Result<String> {
        let digest = Sha256::digest(self.echo()?.as_bytes());
        Ok(format!("run-{}", hex_prefix(&digest, 12)))
    }
}

pub fn hex_prefix(bytes: &[u8], len: usize) -> String {
    let mut s = String::new();
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= len {
            break;
        }
    }
    s.truncate(len);
    s
}

/// Resolves the run root: explicit flag, then env override, then ./runs.
pub fn run_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates the run directory; refuses to reuse an existing one.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let dir = root.join(name);
    if dir.exists() {
        bail!("run directory {} already exists", dir.display());
    }
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    Ok(dir)
}
