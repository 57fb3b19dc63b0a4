//! Training loop and the gradient-error tracking experiment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Sample};
use crate::engines::{compute, EngineOptions, GradReport, StrategyId};
use crate::error::{Error, Result};
use crate::layers::ActivationKind;
use crate::metrics::rel_l2;
use crate::network::{Network, NetworkSpec};
use crate::optim::{Optimizer, OptimizerSpec, Schedule};
use crate::scalar::{Precision, Real};

/// Loss above this counts as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: StrategyId,
    pub optimizer: OptimizerSpec,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub shuffle: bool,
    pub net: NetworkSpec,
    pub engine: EngineOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: StrategyId::Backprop,
            optimizer: OptimizerSpec::default(),
            schedule: Schedule::Constant,
            batch_size: 8,
            epochs: 5,
            seed: 0,
            precision: Precision::F64,
            shuffle: true,
            net: NetworkSpec::default(),
            engine: EngineOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean loss of the batch before the update.
    pub loss: f64,
    /// Fraction of the batch classified correctly before the update.
    pub accuracy: f64,
    /// Relative L2 distance of the gradient to an oracle, when tracked.
    pub grad_error: Option<f64>,
    /// `|theta - theta_0|`.
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    pub initial: Checkpoint,
    pub last: Checkpoint,
    pub divergence: Option<Divergence>,
}

/// Checks that `data` fits `spec` and pads its channels to the network input.
pub fn prepare_data(spec: &NetworkSpec, data: &Dataset) -> Result<Dataset> {
    let [h, w, c] = spec.input;
    if data.height != h || data.width != w {
        return Err(Error::InvalidConfig(format!(
            "dataset images are {}x{}, network expects {h}x{w}",
            data.height, data.width
        )));
    }
    if data.classes > spec.classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, network head has {}",
            data.classes, spec.classes
        )));
    }
    data.padded(c)
}

/// Initial network: drawn in `f64`, then rounded, so both precisions start together.
pub fn init_network<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    Ok(Network::<f64>::random(spec, seed)?.cast())
}

/// Seed of the projected tangent for one sample of one step.
fn sample_seed(seed: u64, step: usize, index: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Batch-averaged gradient in parameter-group order (trunk layers, then head).
struct BatchGrad {
    groups: Vec<Vec<f64>>,
    loss: f64,
    correct: usize,
}

fn batch_grad<T: Real>(
    strategy: StrategyId,
    net: &Network<T>,
    data: &Dataset,
    batch: &[usize],
    opts: &EngineOptions,
    seed: u64,
    step: usize,
) -> Result<BatchGrad> {
    let mut groups: Vec<Vec<f64>> = net.layers().iter().map(|l| vec![0.0; l.n_params()]).collect();
    groups.push(vec![0.0; net.head().n_params()]);
    let mut loss = 0.0;
    let mut correct = 0;
    for &idx in batch {
        let s = &data.samples[idx];
        let x: Vec<T> = s.values.iter().map(|&v| T::of(v)).collect();
        if net.predict(&x)? == s.label {
            correct += 1;
        }
        let o = EngineOptions { seed: sample_seed(seed, step, idx), ..*opts };
        let r: GradReport = compute(strategy, net, &x, s.label, &o)?;
        loss += r.loss;
        for (acc, g) in groups.iter_mut().zip(r.layer_grads.iter().chain(std::iter::once(&r.head_grad))) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    groups.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok(BatchGrad { groups, loss: loss * inv, correct })
}

fn apply<T: Real>(net: &mut Network<T>, opt: &mut Optimizer, groups: &[Vec<f64>], lr: f64) {
    opt.begin_step();
    let n = net.layers().len();
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let params = if i < n { net.layers_mut()[i].params_mut() } else { net.head_mut().params_mut() };
        opt.update(i, params, g, lr);
    }
}

fn drift(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn group_sizes<T: Real>(net: &Network<T>) -> Vec<usize> {
    let mut s = net.layer_dims();
    s.push(net.head().n_params());
    s
}

/// Batches of one epoch, in the order they are visited.
fn epoch_batches(n: usize, batch: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub fn train_with<T: Real>(cfg: &TrainConfig, data: &Dataset, init: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = prepare_data(&cfg.net, data)?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let mut net: Network<T> = init_network(&cfg.net, cfg.seed)?;
    if let Some(c) = init {
        c.apply_to(&mut net)?;
    }
    let initial = Checkpoint::from_network(&net, "");
    let theta0 = net.params_flat();
    let mut opt = Optimizer::new(cfg.optimizer, &group_sizes(&net));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut trace = Vec::new();
    let mut divergence = None;
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.optimizer.lr(), epoch);
        for batch in epoch_batches(data.len(), cfg.batch_size, cfg.shuffle, &mut rng) {
            step += 1;
            let bg = match batch_grad(cfg.strategy, &net, &data, &batch, &cfg.engine, cfg.seed, step) {
                Ok(bg) => bg,
                Err(e @ (Error::Domain { .. } | Error::Singular { .. })) => {
                    divergence = Some(Divergence { step, reason: e.to_string() });
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let finite = bg.loss.is_finite() && bg.groups.iter().flatten().all(|v| v.is_finite());
            trace.push(TraceRecord {
                step,
                epoch,
                loss: bg.loss,
                accuracy: bg.correct as f64 / batch.len() as f64,
                grad_error: None,
                drift: drift(&net.params_flat(), &theta0),
            });
            if !finite || bg.loss > DIVERGENCE_LOSS {
                divergence = Some(Divergence { step, reason: format!("loss {} at step {step}", bg.loss) });
                break 'outer;
            }
            apply(&mut net, &mut opt, &bg.groups, lr);
        }
    }
    let config = String::new();
    Ok(TrainOutcome { trace, initial, last: Checkpoint::from_network(&net, config), divergence })
}

/// Trains in the configured precision.
pub fn train(cfg: &TrainConfig, data: &Dataset, init: Option<&Checkpoint>) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F64 => train_with::<f64>(cfg, data, init),
        Precision::F32 => train_with::<f32>(cfg, data, init),
    }
}

/// Gradient-error tracking: every arm trains with its own gradients while, at each
/// step, its gradient is compared with an `f64` oracle evaluated at the arm's current
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub arms: Vec<StrategyId>,
    pub oracle: StrategyId,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub precision: Precision,
    pub seed: u64,
    /// Independent runs with seeds `seed, seed + 1, ...`; errors are averaged.
    pub repetitions: usize,
    pub net: NetworkSpec,
    pub engine: EngineOptions,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let mut net = NetworkSpec { activation: Some(ActivationKind::Tanh), ..NetworkSpec::default() };
        // Large conditioner outputs push the tanh inputs into saturation.
        net.init.out_gain = 2.0;
        CompareConfig {
            arms: vec![StrategyId::RevBackprop, StrategyId::Mixed],
            oracle: StrategyId::Backprop,
            steps: 200,
            batch_size: 4,
            optimizer: OptimizerSpec::adam(1e-3),
            precision: Precision::F32,
            seed: 0,
            repetitions: 1,
            net,
            engine: EngineOptions::default(),
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.optimizer.validate()?;
        if self.arms.is_empty() || self.steps == 0 || self.batch_size == 0 || self.repetitions == 0 {
            return Err(Error::InvalidConfig("compare needs arms, steps, batch size and repetitions".into()));
        }
        if !self.oracle.is_exact() {
            return Err(Error::InvalidConfig("the oracle strategy must be exact".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmTrace {
    pub strategy: StrategyId,
    /// Per-step relative L2 error, averaged over repetitions; infinite once halted.
    pub errors: Vec<f64>,
    pub losses: Vec<f64>,
    /// First step at which some repetition could not compute a gradient.
    pub halted_at: Option<usize>,
    pub halt_reason: Option<String>,
}

impl ArmTrace {
    /// Mean error over the last tenth of the run.
    pub fn end_error(&self) -> f64 {
        let k = self.errors.len().div_ceil(10).max(1);
        let tail = &self.errors[self.errors.len().saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    /// Last-quartile mean error is at least the first-quartile mean.
    pub fn trend_non_decreasing(&self) -> bool {
        let q = (self.errors.len() / 4).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let first = mean(&self.errors[..q]);
        let last = mean(&self.errors[self.errors.len() - q..]);
        last >= first
    }
}

fn arm_run<T: Real>(
    cfg: &CompareConfig,
    strategy: StrategyId,
    data: &Dataset,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Option<(usize, String)>)> {
    let mut net: Network<T> = init_network(&cfg.net, seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, &group_sizes(&net));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut batches = Vec::new().into_iter();
    let mut errors = Vec::with_capacity(cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                batches = epoch_batches(data.len(), cfg.batch_size, true, &mut rng).into_iter();
                batches.next().expect("dataset is not empty")
            }
        };
        let arm = match batch_grad(strategy, &net, data, &batch, &cfg.engine, seed, step) {
            Ok(g) => g,
            Err(e @ (Error::Domain { .. } | Error::Singular { .. })) => {
                errors.resize(cfg.steps, f64::INFINITY);
                losses.resize(cfg.steps, f64::NAN);
                return Ok((errors, losses, Some((step, e.to_string()))));
            }
            Err(e) => return Err(e),
        };
        let oracle_net: Network<f64> = net.cast();
        // The oracle sees exactly the inputs the arm saw, rounded to its precision.
        let rounded = data.with_samples(
            batch
                .iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    Sample { label: s.label, values: s.values.iter().map(|&v| T::of(v).as_f64()).collect() }
                })
                .collect(),
        );
        let idx: Vec<usize> = (0..batch.len()).collect();
        let oracle = batch_grad(cfg.oracle, &oracle_net, &rounded, &idx, &cfg.engine, seed, step)?;
        let a: Vec<f64> = arm.groups.iter().flatten().copied().collect();
        let b: Vec<f64> = oracle.groups.iter().flatten().copied().collect();
        errors.push(rel_l2(&a, &b));
        losses.push(arm.loss);
        apply(&mut net, &mut opt, &arm.groups, cfg.optimizer.lr());
    }
    Ok((errors, losses, None))
}

/// Runs every arm of the experiment.
pub fn compare(cfg: &CompareConfig, data: &Dataset) -> Result<Vec<ArmTrace>> {
    cfg.validate()?;
    let data = prepare_data(&cfg.net, data)?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let mut out = Vec::with_capacity(cfg.arms.len());
    for &strategy in &cfg.arms {
        let mut trace = ArmTrace {
            strategy,
            errors: vec![0.0; cfg.steps],
            losses: vec![0.0; cfg.steps],
            halted_at: None,
            halt_reason: None,
        };
        for rep in 0..cfg.repetitions {
            let seed = cfg.seed.wrapping_add(rep as u64);
            let (e, l, halt) = match cfg.precision {
                Precision::F64 => arm_run::<f64>(cfg, strategy, &data, seed)?,
                Precision::F32 => arm_run::<f32>(cfg, strategy, &data, seed)?,
            };
            for i in 0..cfg.steps {
                trace.errors[i] += e[i] / cfg.repetitions as f64;
                trace.losses[i] += l[i] / cfg.repetitions as f64;
            }
            if let Some((step, reason)) = halt {
                if trace.halted_at.is_none_or(|s| step < s) {
                    trace.halted_at = Some(step);
                    trace.halt_reason = Some(reason);
                }
            }
        }
        out.push(trace);
    }
    Ok(out)
}
