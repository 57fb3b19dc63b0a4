//! Command bodies. Each takes a resolved configuration and an output directory, which
//! must already hold the run manifest.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use invgrad::bench::{emit_report, fit_exponent, fit_scaling, run_sweep_with, Field, SweepConfig, SweepRow};
use invgrad::checkpoint::Checkpoint;
use invgrad::data::Dataset;
use invgrad::gradcheck::{gradcheck as check, CheckRow};
use invgrad::trainer::{compare as run_compare, init_network, train as run_train, ArmTrace, CompareConfig, TrainConfig};
use invgrad::{Network, Precision, Real, StrategyId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, DataSource, GradcheckSection};

/// Whether every check of a command held.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_data(src: &DataSource) -> anyhow::Result<Dataset> {
    Ok(match &src.path {
        Some(p) => Dataset::load(p).with_context(|| format!("cannot load dataset {}", p.display()))?,
        None => Dataset::synthetic(&src.synthetic, src.seed)?,
    })
}

/// Sample fed to the checked network, drawn from the run seed.
pub fn gradcheck_input(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn gradcheck(sec: &GradcheckSection, out: &Path, log: &mut dyn Write) -> anyhow::Result<Verdict> {
    match sec.precision {
        Precision::F64 => gradcheck_in::<f64>(sec, out, log),
        Precision::F32 => gradcheck_in::<f32>(sec, out, log),
    }
}

fn gradcheck_in<T: Real>(sec: &GradcheckSection, out: &Path, log: &mut dyn Write) -> anyhow::Result<Verdict> {
    let mut net: Network<T> = init_network(&sec.net, sec.seed)?;
    if let Some(layer) = sec.inject_fault {
        net.inject_fault(layer)?;
    }
    let x: Vec<T> = gradcheck_input(net.input_len(), sec.seed).into_iter().map(T::of).collect();
    writeln!(
        log,
        "gradcheck: input {:?}, {} trunk layers, {} parameters, {:?}",
        sec.net.input,
        net.layers().len(),
        net.n_params(),
        sec.precision
    )?;
    let rows = check(&net, &x, sec.label, &sec.check_config())?;
    let mut csv = format!("{}\n", CheckRow::CSV_HEADER);
    let mut verdict = Verdict::Pass;
    for row in &rows {
        writeln!(log, "{row}")?;
        writeln!(csv, "{}", row.csv())?;
        if !row.passed {
            verdict = Verdict::Fail;
        }
        if let Some(n) = row.max_live_trunk_grads {
            if n > 1 {
                writeln!(log, "FAIL {:<12} held {n} trunk gradients at once", row.strategy.name())?;
                verdict = Verdict::Fail;
            }
        }
    }
    write_file(&out.join("gradcheck.csv"), &csv)?;
    writeln!(log, "gradcheck: {}", if verdict == Verdict::Pass { "all checks passed" } else { "FAILED" })?;
    Ok(verdict)
}

pub const TRACE_HEADER: &str = "step,epoch,loss,accuracy,grad_error,drift";

pub fn train(
    cfg: &TrainConfig,
    data: &DataSource,
    init: Option<&Path>,
    echo: &str,
    out: &Path,
    log: &mut dyn Write,
) -> anyhow::Result<Verdict> {
    let data = load_data(data)?;
    let init = init.map(Checkpoint::load).transpose().context("cannot load initial checkpoint")?;
    let outcome = run_train(cfg, &data, init.as_ref())?;
    let mut csv = format!("{TRACE_HEADER}\n");
    for r in &outcome.trace {
        let ge = r.grad_error.map(|e| format!("{e:e}")).unwrap_or_default();
        writeln!(csv, "{},{},{:e},{},{},{:e}", r.step, r.epoch, r.loss, r.accuracy, ge, r.drift)?;
    }
    write_file(&out.join("trace.csv"), &csv)?;
    let mut last = outcome.last.clone();
    last.config = echo.to_string();
    last.save(&out.join("model.ckpt"))?;
    match (&outcome.divergence, outcome.trace.last()) {
        (Some(d), _) => {
            writeln!(log, "train: diverged at step {}: {}", d.step, d.reason)?;
            return Ok(Verdict::Fail);
        }
        (None, Some(r)) => writeln!(log, "train: {} steps, final loss {:.6}, accuracy {:.3}", r.step, r.loss, r.accuracy)?,
        (None, None) => writeln!(log, "train: no steps taken")?,
    }
    Ok(Verdict::Pass)
}

/// Runs the sweep and writes `sweep.csv` and the charts.
pub fn bench(cfg: &SweepConfig, out: &Path, log: &mut dyn Write) -> anyhow::Result<(Vec<SweepRow>, Vec<PathBuf>)> {
    let rows = run_sweep_with(cfg, &mut |r| {
        let _ = writeln!(
            log,
            "{:<12} L={:<3} peak={:<10} time_ms={:<10} {}",
            r.strategy.name(),
            r.l_total,
            r.peak_bytes.map(|b| b.to_string()).unwrap_or_default(),
            r.time_ms.map(|t| format!("{t:.3}")).unwrap_or_default(),
            r.status
        );
    })?;
    let files = emit_report(&rows, out, true)?;
    for s in &cfg.strategies {
        let mine: Vec<SweepRow> = rows.iter().filter(|r| r.strategy == *s).cloned().collect();
        let mut line = format!("{:<12}", s.name());
        if let Ok(f) = fit_scaling(&mine, Field::LTotal, Field::PeakBytes) {
            write!(line, " peak slope {:.1} B/layer (r2 {:.3})", f.slope, f.r2)?;
        }
        if let Ok(f) = fit_exponent(&mine, Field::LTotal, Field::TimeMs) {
            write!(line, " time exponent {:.2}", f.slope)?;
        }
        writeln!(log, "{line}")?;
    }
    Ok((rows, files))
}

pub const COMPARE_HEADER: &str = "step,strategy,grad_error,loss";

/// Arms whose final error is at least `ratio` times the best arm's while not improving.
pub fn diverging_arms(arms: &[ArmTrace], ratio: f64) -> Vec<StrategyId> {
    let best = arms.iter().map(ArmTrace::end_error).fold(f64::INFINITY, f64::min);
    arms.iter()
        .filter(|a| a.end_error() > 0.0 && a.end_error() >= ratio * best && a.trend_non_decreasing())
        .map(|a| a.strategy)
        .collect()
}

pub const DIVERGENCE_RATIO: f64 = 10.0;

pub fn compare(cfg: &CompareConfig, data: &DataSource, out: &Path, log: &mut dyn Write) -> anyhow::Result<Vec<ArmTrace>> {
    let data = load_data(data)?;
    let arms = run_compare(cfg, &data)?;
    let mut csv = format!("{COMPARE_HEADER}\n");
    for a in &arms {
        for (i, (e, l)) in a.errors.iter().zip(&a.losses).enumerate() {
            writeln!(csv, "{},{},{:e},{:e}", i + 1, a.strategy, e, l)?;
        }
    }
    write_file(&out.join("compare.csv"), &csv)?;
    let mut summary = String::new();
    for a in &arms {
        write!(
            summary,
            "{}: end_error {:.3e}, max_error {:.3e}, trend {}",
            a.strategy,
            a.end_error(),
            a.max_error(),
            if a.trend_non_decreasing() { "non-decreasing" } else { "decreasing" }
        )?;
        if let Some(step) = a.halted_at {
            write!(summary, ", halted at step {step}")?;
        }
        summary.push_str("; ");
    }
    let div = diverging_arms(&arms, DIVERGENCE_RATIO);
    let names: Vec<&str> = div.iter().map(|s| s.name()).collect();
    writeln!(log, "summary: {summary}divergence {}", if div.is_empty() { "no".to_string() } else { format!("yes ({})", names.join(", ")) })?;
    Ok(arms)
}

pub fn dataset_gen(src: &DataSource, out: &Path, log: &mut dyn Write) -> anyhow::Result<PathBuf> {
    let data = Dataset::synthetic(&src.synthetic, src.seed)?;
    let path = out.join("dataset.csv");
    data.save(&path)?;
    writeln!(log, "dataset: {} samples of {}x{}x{} written to {}", data.len(), data.height, data.width, data.channels, path.display())?;
    Ok(path)
}

/// Checks a resolved configuration for `command` without computing anything.
pub fn validate(cfg: &Config, command: &str) -> anyhow::Result<()> {
    match command {
        "gradcheck" => {
            cfg.gradcheck.net.validate()?;
            let classes = cfg.gradcheck.net.classes;
            if cfg.gradcheck.label >= classes {
                anyhow::bail!("label {} outside [0, {classes})", cfg.gradcheck.label);
            }
        }
        "train" => cfg.train.validate()?,
        "bench" => cfg.bench.validate()?,
        "compare" => cfg.compare.validate()?,
        _ => {}
    }
    if matches!(command, "train" | "compare" | "dataset gen") && cfg.data.path.is_none() {
        cfg.data.synthetic.validate()?;
    }
    Ok(())
}
