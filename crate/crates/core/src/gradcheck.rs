//! Checks every strategy against reverse mode, and reverse mode against central differences.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engines::{compute, fd_gradient_with, EngineOptions, StrategyId};
use crate::error::Result;
use crate::metrics::{cosine, without, worst_component, EXACT_FLOOR, FD_FLOOR};
use crate::network::Network;
use crate::scalar::{Precision, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Strategies compared with Backprop.
    pub strategies: Vec<StrategyId>,
    /// Largest relative error of an exact strategy.
    pub exact_tol: f64,
    /// Smallest cosine of the projected estimate with the true gradient. Only the sign of
    /// a single projection is informative, so the default accepts anything.
    pub proj_min_cosine: f64,
    /// Central-difference step; `None` skips the difference check.
    pub fd_eps: Option<f64>,
    pub fd_tol: f64,
    pub engine: EngineOptions,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig::for_precision(Precision::F64)
    }
}

impl GradcheckConfig {
    /// Differences are meaningless in single precision, so f32 only compares strategies.
    pub fn for_precision(p: Precision) -> Self {
        let (exact_tol, fd_eps) = match p {
            Precision::F64 => (1e-7, Some(1e-5)),
            Precision::F32 => (1e-3, None),
        };
        GradcheckConfig {
            strategies: StrategyId::ALL.into_iter().filter(|s| *s != StrategyId::Backprop).collect(),
            exact_tol,
            proj_min_cosine: -1.0,
            fd_eps,
            fd_tol: 1e-5,
            engine: EngineOptions::default(),
        }
    }
}

/// Where the worst component of a comparison lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    Layer { index: usize, kind: &'static str },
    Head,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Layer { index, kind } => write!(f, "layer {index} ({kind})"),
            Location::Head => f.write_str("head"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub strategy: StrategyId,
    /// `Backprop` or `FiniteDifference`.
    pub reference: &'static str,
    /// Relative error, or cosine for the projected estimator.
    pub metric: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub worst: Option<Location>,
    pub max_live_trunk_grads: Option<usize>,
    /// Components left out because the difference interval crossed a ReLU kink.
    pub skipped: usize,
    pub passed: bool,
}

impl CheckRow {
    pub const CSV_HEADER: &'static str = "strategy,reference,metric,value,tolerance,worst,skipped,passed";

    pub fn csv(&self) -> String {
        let worst = self.worst.map(|w| w.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{:e},{:e},{},{},{}",
            self.strategy, self.reference, self.metric, self.value, self.tolerance, worst, self.skipped, self.passed
        )
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "ok  " } else { "FAIL" };
        write!(
            f,
            "{verdict} {:<12} vs {:<16} {} {:.3e} (tol {:.1e})",
            self.strategy.name(),
            self.reference,
            self.metric,
            self.value,
            self.tolerance
        )?;
        if self.skipped > 0 {
            write!(f, ", {} component(s) at a kink skipped", self.skipped)?;
        }
        match (self.passed, self.worst) {
            (false, Some(w)) => write!(f, ", worst at {w}"),
            _ => Ok(()),
        }
    }
}

fn locate<T: Real>(net: &Network<T>, component: usize) -> Location {
    let mut offset = 0;
    for (index, layer) in net.layers().iter().enumerate() {
        offset += layer.n_params();
        if component < offset {
            return Location::Layer { index, kind: layer.name() };
        }
    }
    Location::Head
}

/// Runs every configured comparison on one sample.
pub fn gradcheck<T: Real>(net: &Network<T>, x0: &[T], label: usize, cfg: &GradcheckConfig) -> Result<Vec<CheckRow>> {
    let oracle = compute(StrategyId::Backprop, net, x0, label, &cfg.engine)?;
    let reference = oracle.flat();
    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        let r = compute(strategy, net, x0, label, &cfg.engine)?;
        let row = if strategy.is_exact() {
            let (i, err) = worst_component(&r.flat(), &reference, EXACT_FLOOR).unwrap_or((0, 0.0));
            // NaN compares false, so it fails.
            let passed = err <= cfg.exact_tol;
            CheckRow {
                strategy,
                reference: "Backprop",
                metric: "max_rel_err",
                value: err,
                tolerance: cfg.exact_tol,
                worst: (err > 0.0 || err.is_nan()).then(|| locate(net, i)),
                max_live_trunk_grads: r.max_live_trunk_grads,
                skipped: 0,
                passed,
            }
        } else {
            let c = cosine(&r.flat(), &reference);
            CheckRow {
                strategy,
                reference: "Backprop",
                metric: "cosine",
                value: c,
                tolerance: cfg.proj_min_cosine,
                worst: None,
                max_live_trunk_grads: r.max_live_trunk_grads,
                skipped: 0,
                passed: c >= cfg.proj_min_cosine,
            }
        };
        rows.push(row);
    }
    if let Some(eps) = cfg.fd_eps {
        let fd = fd_gradient_with(net, x0, label, eps, cfg.engine.flop_budget)?;
        let (a, b) = without(&reference, &fd.flat(), &fd.kinks);
        let (i, err) = worst_component(&a, &b, FD_FLOOR).unwrap_or((0, 0.0));
        // Back to an index into the full vector.
        let i = fd.kinks.iter().fold(i, |i, &k| if k <= i { i + 1 } else { i });
        rows.push(CheckRow {
            strategy: StrategyId::Backprop,
            reference: "FiniteDifference",
            metric: "max_rel_err",
            value: err,
            tolerance: cfg.fd_tol,
            worst: (err > 0.0 || err.is_nan()).then(|| locate(net, i)),
            max_live_trunk_grads: None,
            skipped: fd.kinks.len(),
            passed: err <= cfg.fd_tol,
        });
    }
    Ok(rows)
}
