//! Sweeps strategies over network sizes and records memory, time and accuracy.

pub mod fit;
pub mod report;

use std::fmt;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engines::{compute, EngineOptions, StrategyId};
use crate::error::{Error, Result};
use crate::layers::{InitSpec, SubnetSpec};
use crate::metrics::max_rel_err;
use crate::network::{Network, NetworkSpec};

pub use fit::{fit_exponent, fit_line, fit_loglog, fit_scaling, Field, Fit};
pub use report::{emit_report, svg_chart, write_csv, CSV_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub strategies: Vec<StrategyId>,
    pub layers_per_block: Vec<usize>,
    /// Input channel counts.
    pub channels: Vec<usize>,
    pub blocks: usize,
    pub height: usize,
    pub width: usize,
    pub subnet: SubnetSpec,
    pub classes: usize,
    pub init: InitSpec,
    /// Timed runs per cell; the median is reported.
    pub repetitions: usize,
    /// Untimed runs before the timed ones.
    pub warmup: usize,
    pub seed: u64,
    /// Without timing every cell runs once and `time_ms` stays empty, which makes the
    /// output fully deterministic.
    pub timing: bool,
    /// Cells whose estimated multiply-add count exceeds this are skipped.
    pub flop_budget: Option<f64>,
    /// Floor of the relative error, as a fraction of the largest reference component.
    pub error_floor: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            strategies: StrategyId::ALL.to_vec(),
            layers_per_block: vec![1, 3, 5, 10],
            channels: vec![4],
            blocks: 3,
            height: 8,
            width: 8,
            subnet: SubnetSpec { depth: 3, hidden_width: 16 },
            classes: 2,
            init: InitSpec::default(),
            repetitions: 5,
            warmup: 1,
            seed: 0,
            timing: true,
            flop_budget: Some(5e10),
            error_floor: crate::metrics::EXACT_FLOOR,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.layers_per_block.is_empty() || self.channels.is_empty() {
            return Err(Error::InvalidConfig("sweep grids must not be empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
        }
        if let Some(b) = self.flop_budget {
            if !(b > 0.0) {
                return Err(Error::InvalidConfig(format!("budget must be positive, got {b}")));
            }
        }
        for &c in &self.channels {
            for &lpb in &self.layers_per_block {
                self.net_spec(lpb, c).validate()?;
            }
        }
        Ok(())
    }

    pub fn net_spec(&self, lpb: usize, channels: usize) -> NetworkSpec {
        NetworkSpec {
            input: [self.height, self.width, channels],
            blocks: vec![lpb; self.blocks],
            subnet: self.subnet,
            activation: None,
            downsample: true,
            alternate_halves: false,
            classes: self.classes,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    BudgetSkipped,
}

impl fmt::Display for RowStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RowStatus::Ok => "ok",
            RowStatus::BudgetSkipped => "budget_skipped",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: StrategyId,
    /// Number of coupling layers.
    pub l_total: usize,
    /// Input size.
    pub n: usize,
    /// Total trainable parameters, head included.
    pub d: usize,
    pub peak_bytes: Option<u64>,
    pub time_ms: Option<f64>,
    /// Against Backprop; absent for the stochastic estimator.
    pub max_rel_err: Option<f64>,
    pub status: RowStatus,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    run_sweep_with(cfg, &mut |_| {})
}

/// Runs the sweep, reporting each row as it completes.
pub fn run_sweep_with(cfg: &SweepConfig, progress: &mut dyn FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &c in &cfg.channels {
        for &lpb in &cfg.layers_per_block {
            let spec = cfg.net_spec(lpb, c);
            let net: Network<f64> = Network::random(&spec, cfg.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
            let x: Vec<f64> = (0..net.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let label = 0;
            let opts = EngineOptions { seed: cfg.seed, flop_budget: cfg.flop_budget, phase1_chunk: 1 };
            let oracle = compute(StrategyId::Backprop, &net, &x, label, &opts)?.flat();
            for &strategy in &cfg.strategies {
                let mut row = SweepRow {
                    strategy,
                    l_total: net.n_couplings(),
                    n: net.input_len(),
                    d: net.n_params(),
                    peak_bytes: None,
                    time_ms: None,
                    max_rel_err: None,
                    status: RowStatus::Ok,
                };
                let first = match compute(strategy, &net, &x, label, &opts) {
                    Ok(r) => r,
                    Err(Error::BudgetExceeded { .. }) => {
                        row.status = RowStatus::BudgetSkipped;
                        progress(&row);
                        rows.push(row);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                row.peak_bytes = Some(first.peak_tracked_bytes);
                if strategy.is_exact() {
                    row.max_rel_err = Some(max_rel_err(&first.flat(), &oracle, cfg.error_floor));
                }
                if cfg.timing {
                    // The first run above doubles as the first warm-up.
                    for _ in 1..cfg.warmup {
                        compute(strategy, &net, &x, label, &opts)?;
                    }
                    let mut times = Vec::with_capacity(cfg.repetitions);
                    for _ in 0..cfg.repetitions {
                        times.push(compute(strategy, &net, &x, label, &opts)?.wall_time);
                    }
                    row.time_ms = Some(median(times).as_secs_f64() * 1e3);
                }
                progress(&row);
                rows.push(row);
            }
        }
    }
    let order = |s: StrategyId| StrategyId::ALL.iter().position(|&t| t == s).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (order(r.strategy), r.n, r.l_total));
    Ok(rows)
}
