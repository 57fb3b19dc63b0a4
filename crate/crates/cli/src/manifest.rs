use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::Config;

/// Everything needed to repeat a run. Passing the file back as `--config` reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// The configuration after flags and defaults were applied.
    pub config: Config,
    pub seed: u64,
    pub outdir: PathBuf,
    pub version: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn write(&self, outdir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(outdir).with_context(|| format!("cannot create {}", outdir.display()))?;
        let path = outdir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
