//! Gradient strategies.
//!
//! Each strategy computes the gradient of the loss for one sample and records the peak
//! of tracked bytes in a fresh [`Ledger`]. Trunk gradients are reported layer by layer
//! through an optional sink as soon as they are final.

mod backprop;
mod fd;
mod forward;
mod moonwalk;
mod proj;
mod revbackprop;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{AllocTag, Ledger};
use crate::network::Network;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub use fd::{fd_gradient, fd_gradient_with, FdGradient};
pub use moonwalk::{phase1_forward, phase1_reverse, phase2, Phase1, Phase2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    Backprop,
    Forward,
    ProjForward,
    RevBackprop,
    Moonwalk,
    Mixed,
}

impl StrategyId {
    pub const ALL: [StrategyId; 6] = [
        StrategyId::Backprop,
        StrategyId::Forward,
        StrategyId::ProjForward,
        StrategyId::RevBackprop,
        StrategyId::Moonwalk,
        StrategyId::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyId::Backprop => "Backprop",
            StrategyId::Forward => "Forward",
            StrategyId::ProjForward => "ProjForward",
            StrategyId::RevBackprop => "RevBackprop",
            StrategyId::Moonwalk => "Moonwalk",
            StrategyId::Mixed => "Mixed",
        }
    }

    /// Exact up to rounding; everything except the projected estimator.
    pub fn is_exact(self) -> bool {
        self != StrategyId::ProjForward
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_ascii_lowercase();
        StrategyId::ALL
            .into_iter()
            .find(|id| id.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineOptions {
    /// Seed of the projected tangent.
    pub seed: u64,
    /// Refuse strategies whose estimated multiply-add count exceeds this.
    pub flop_budget: Option<f64>,
    /// Basis tangents pushed per forward evaluation when computing the input gradient
    /// in forward mode.
    pub phase1_chunk: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { seed: 0, flop_budget: None, phase1_chunk: 1 }
    }
}

impl EngineOptions {
    pub(crate) fn check_budget(&self, estimate: f64) -> Result<()> {
        match self.flop_budget {
            Some(budget) if estimate > budget => Err(Error::BudgetExceeded { estimate, budget }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub strategy: StrategyId,
    /// One entry per trunk layer; empty for parameter-free layers.
    pub layer_grads: Vec<Vec<f64>>,
    pub head_grad: Vec<f64>,
    /// `dJ/dx_0`, when the strategy computes it.
    pub input_grad: Option<Vec<f64>>,
    /// `dJ/dx_L` as reached by the forward cotangent recursion.
    pub output_grad: Option<Vec<f64>>,
    pub loss: f64,
    pub peak_tracked_bytes: u64,
    pub wall_time: Duration,
    pub stochastic: bool,
    pub tangent_seed: Option<u64>,
    /// Most trunk gradient buffers alive at once while streaming gradients out.
    pub max_live_trunk_grads: Option<usize>,
    /// Peak bytes of parameter residuals while computing the input gradient.
    pub phase1_residual_theta_peak: Option<u64>,
    pub phase1_peak_tracked_bytes: Option<u64>,
}

impl GradReport {
    /// Trunk gradients followed by the head gradient, in parameter order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.layer_grads.iter().flatten().copied().collect();
        out.extend_from_slice(&self.head_grad);
        out
    }

    pub fn n_params(&self) -> usize {
        self.layer_grads.iter().map(Vec::len).sum::<usize>() + self.head_grad.len()
    }
}

/// Receives `(layer index, gradient)` for every parameterized trunk layer.
pub type GradSink<'a, T> = dyn FnMut(usize, &[T]) + 'a;

/// Shared bookkeeping of one strategy run.
pub(crate) struct Run<'s, 'a, T: Real> {
    pub ledger: Ledger,
    pub report: GradReport,
    sink: Option<&'s mut GradSink<'a, T>>,
}

impl<'s, 'a, T: Real> Run<'s, 'a, T> {
    fn new(strategy: StrategyId, net: &Network<T>, ledger: Ledger, sink: Option<&'s mut GradSink<'a, T>>) -> Self {
        Run {
            ledger,
            report: GradReport {
                strategy,
                layer_grads: vec![Vec::new(); net.layers().len()],
                head_grad: Vec::new(),
                input_grad: None,
                output_grad: None,
                loss: f64::NAN,
                peak_tracked_bytes: 0,
                wall_time: Duration::ZERO,
                stochastic: false,
                tangent_seed: None,
                max_live_trunk_grads: None,
                phase1_residual_theta_peak: None,
                phase1_peak_tracked_bytes: None,
            },
            sink,
        }
    }

    /// Hands a finished trunk gradient to the caller.
    pub fn emit(&mut self, layer: usize, g: &Tensor<T>) {
        if let Some(s) = self.sink.as_mut() {
            s(layer, g.data());
        }
        self.report.layer_grads[layer] = g.to_f64();
    }
}

/// Computes the gradient for one sample with a fresh ledger.
pub fn compute<T: Real>(
    strategy: StrategyId,
    net: &Network<T>,
    x0: &[T],
    label: usize,
    opts: &EngineOptions,
) -> Result<GradReport> {
    compute_in(strategy, net, x0, label, opts, &Ledger::new(), None)
}

/// Like [`compute`], in a caller-provided ledger and with an optional gradient sink.
pub fn compute_in<T: Real>(
    strategy: StrategyId,
    net: &Network<T>,
    x0: &[T],
    label: usize,
    opts: &EngineOptions,
    ledger: &Ledger,
    sink: Option<&mut GradSink<'_, T>>,
) -> Result<GradReport> {
    if x0.len() != net.input_len() {
        return Err(Error::LengthMismatch { op: "input", expected: net.input_len(), actual: x0.len() });
    }
    if label >= net.head().classes() {
        return Err(Error::Label { label, classes: net.head().classes() });
    }
    let start = Instant::now();
    ledger.reset_peaks();
    // Parameters are resident for the whole run but never count towards the peak.
    let params = ledger.register(AllocTag::Parameter, net.n_params() as u64 * T::BYTES);
    let mut run = Run::new(strategy, net, ledger.clone(), sink);
    let x = net.input_tensor(ledger, x0)?;
    match strategy {
        StrategyId::Backprop => backprop::run(net, x, label, &mut run)?,
        StrategyId::Forward => forward::run(net, x, label, opts, &mut run)?,
        StrategyId::ProjForward => proj::run(net, x, label, opts, &mut run)?,
        StrategyId::RevBackprop => revbackprop::run(net, x, label, &mut run)?,
        StrategyId::Moonwalk => moonwalk::run(net, x, label, opts, false, &mut run)?,
        StrategyId::Mixed => moonwalk::run(net, x, label, opts, true, &mut run)?,
    }
    ledger.release(params)?;
    let mut report = run.report;
    report.peak_tracked_bytes = ledger.peak_tracked_bytes();
    report.wall_time = start.elapsed();
    Ok(report)
}
