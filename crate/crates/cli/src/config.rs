//! Run configuration: one TOML file with a section per command.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use invgrad::bench::SweepConfig;
use invgrad::data::SyntheticSpec;
use invgrad::gradcheck::GradcheckConfig;
use invgrad::trainer::{CompareConfig, TrainConfig};
use invgrad::{EngineOptions, NetworkSpec, Precision, StrategyId};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub gradcheck: GradcheckSection,
    pub train: TrainConfig,
    pub bench: SweepConfig,
    pub compare: CompareConfig,
    /// Data for `train` and `compare`, and what `dataset gen` writes.
    pub data: DataSource,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: CONFIG_VERSION,
            gradcheck: GradcheckSection::default(),
            train: TrainConfig::default(),
            bench: SweepConfig::default(),
            compare: CompareConfig::default(),
            data: DataSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub net: NetworkSpec,
    pub seed: u64,
    pub precision: Precision,
    pub label: usize,
    /// Strategies compared with Backprop; all of them when absent.
    pub strategies: Option<Vec<StrategyId>>,
    /// Tolerances default per precision.
    pub exact_tol: Option<f64>,
    pub fd_eps: Option<f64>,
    pub fd_tol: Option<f64>,
    pub skip_fd: bool,
    pub engine: EngineOptions,
    /// Flip the sign of the inverse-Jacobian product of this trunk layer.
    pub inject_fault: Option<usize>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            net: NetworkSpec {
                input: [4, 4, 2],
                blocks: vec![2, 2],
                subnet: invgrad::layers::SubnetSpec { depth: 2, hidden_width: 4 },
                ..NetworkSpec::default()
            },
            seed: 0,
            precision: Precision::F64,
            label: 0,
            strategies: None,
            exact_tol: None,
            fd_eps: None,
            fd_tol: None,
            skip_fd: false,
            engine: EngineOptions::default(),
            inject_fault: None,
        }
    }
}

impl GradcheckSection {
    pub fn check_config(&self) -> GradcheckConfig {
        let mut c = GradcheckConfig::for_precision(self.precision);
        if let Some(s) = &self.strategies {
            c.strategies = s.iter().copied().filter(|s| *s != StrategyId::Backprop).collect();
        }
        if let Some(t) = self.exact_tol {
            c.exact_tol = t;
        }
        if let Some(e) = self.fd_eps {
            c.fd_eps = Some(e);
        }
        if let Some(t) = self.fd_tol {
            c.fd_tol = t;
        }
        if self.skip_fd {
            c.fd_eps = None;
        }
        c.engine = self.engine;
        c
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    /// Dataset file; synthetic data is generated when absent.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Seed of the synthetic data, independent of the run seed.
    pub seed: u64,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource { path: None, synthetic: SyntheticSpec { count: 128, noise: 0.3, ..SyntheticSpec::default() }, seed: 100 }
    }
}

/// Parses a config file, or the `config` member of a run manifest when the file is JSON.
pub fn load(path: &Path) -> anyhow::Result<Config> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: crate::manifest::RunManifest =
            serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))?;
        return Ok(manifest.config);
    }
    parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn parse(text: &str) -> anyhow::Result<Config> {
    let table: toml::Table = toml::from_str(text)?;
    match table.get("version") {
        None => bail!("missing `version = {CONFIG_VERSION}`"),
        Some(toml::Value::Integer(v)) if *v == CONFIG_VERSION as i64 => {}
        Some(v) => bail!("unsupported config version {v}, expected {CONFIG_VERSION}"),
    }
    Ok(toml::from_str(text)?)
}
