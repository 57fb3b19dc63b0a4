//! Forward-recursion gradients through invertible layers.
//!
//! Given `h_0 = dJ/dx_0`, a second forward pass produces `h_i = h_{i-1} J_i^{-1}` and
//! `g_i = h_i dx_i/dtheta_i` layer by layer, so only the current activation, the
//! current cotangent and one gradient buffer are ever alive. `h_0` comes either from
//! one forward-mode pass per input coordinate or from a reverse pass that keeps only
//! input-linearization residuals.

use super::{EngineOptions, Run};
use crate::error::Result;
use crate::layers::{Keep, ParamTangent, ResidualX};
use crate::ledger::{AllocTag, Ledger};
use crate::network::Network;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Result of the reverse input-gradient pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase1 {
    pub h0: Vec<f64>,
    pub head_grad: Vec<f64>,
    pub loss: f64,
    pub residual_theta_peak: u64,
    pub peak_tracked_bytes: u64,
}

/// Multiply-adds of the forward-mode input gradient.
pub(crate) fn estimate<T: Real>(net: &Network<T>) -> f64 {
    net.input_len() as f64 * 2.0 * net.flops_from(0) as f64
}

/// `dJ/dx_0` by `n` tangent passes with standard basis seeds. Tangents are pushed
/// `chunk` at a time through one shared forward evaluation.
fn input_grad_forward<T: Real>(net: &Network<T>, x0: &Tensor<T>, label: usize, chunk: usize) -> Result<Tensor<T>> {
    let n = x0.len();
    let chunk = chunk.max(1);
    let head = net.head();
    let mut h0 = x0.zeros_like(AllocTag::Cotangent)?;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut x = x0.copy(AllocTag::Activation)?;
        let mut ts = Vec::with_capacity(end - start);
        for l in start..end {
            let mut u = x0.zeros_like(AllocTag::Tangent)?;
            u.data_mut()[l] = T::one();
            ts.push(u);
        }
        for (i, layer) in net.layers().iter().enumerate() {
            let y = if ts.len() == 1 {
                let (y, t) = layer.tangent_step(&x, Some(&ts[0]), ParamTangent::None).map_err(|e| e.at_layer(i))?;
                std::mem::replace(&mut ts[0], t).free()?;
                y
            } else {
                for t in ts.iter_mut() {
                    let tn = layer.jvp_input(&x, t).map_err(|e| e.at_layer(i))?;
                    std::mem::replace(t, tn).free()?;
                }
                layer.forward(&x).map_err(|e| e.at_layer(i))?
            };
            x.free()?;
            x = y;
        }
        let cache = head.cache(&x, label)?;
        for (l, t) in (start..end).zip(ts) {
            h0.data_mut()[l] = head.jvp_input(&cache, &t)?;
            t.free()?;
        }
        cache.free()?;
        x.free()?;
        start = end;
    }
    Ok(h0)
}

struct ReverseOut<T: Real> {
    h0: Tensor<T>,
    head_grad: Vec<f64>,
    loss: f64,
}

/// `dJ/dx_0` by a reverse pass that stores only input-linearization residuals. The
/// head gradient falls out on the way.
fn input_grad_reverse<T: Real>(net: &Network<T>, x0: &Tensor<T>, label: usize) -> Result<ReverseOut<T>> {
    let mut x = x0.copy(AllocTag::Activation)?;
    let mut stored = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let (y, res) = layer.forward_residuals(&x, Keep::X).map_err(|e| e.at_layer(i))?;
        debug_assert!(res.theta.is_none());
        x.free()?;
        x = y;
        stored.push(res.x.unwrap_or(ResidualX::Nothing));
    }
    let head = net.head();
    let cache = head.cache(&x, label)?;
    let loss = cache.loss.as_f64();
    let mut v = head.input_grad(&cache, &x)?;
    let hg = head.param_grad(&cache, &x)?;
    let head_grad = hg.to_f64();
    hg.free()?;
    cache.free()?;
    x.free()?;
    for (i, layer) in net.layers().iter().enumerate().rev() {
        let rx = stored.pop().expect("one residual per layer");
        let next = layer.vjp_input(&rx, &v).map_err(|e| e.at_layer(i))?;
        v.free()?;
        rx.free()?;
        v = next;
    }
    Ok(ReverseOut { h0: v, head_grad, loss })
}

struct ForwardOut<T: Real> {
    x_last: Tensor<T>,
    h_last: Tensor<T>,
    max_live_grads: usize,
}

/// The forward cotangent recursion. Consumes `x0` and `h0`.
fn stream<T: Real>(net: &Network<T>, x0: Tensor<T>, h0: Tensor<T>, run: &mut Run<'_, '_, T>) -> Result<ForwardOut<T>> {
    run.ledger.begin_window();
    let (mut x, mut h) = (x0, h0);
    for (i, layer) in net.layers().iter().enumerate() {
        let (y, hn, g) = layer.advance(&x, &h, true).map_err(|e| e.at_layer(i))?;
        x.free()?;
        h.free()?;
        x = y;
        h = hn;
        if let Some(g) = g {
            run.emit(i, &g);
            g.free()?;
        }
    }
    let max_live_grads = run.ledger.window_peak_count(AllocTag::Gradient);
    Ok(ForwardOut { x_last: x, h_last: h, max_live_grads })
}

pub(super) fn run<T: Real>(
    net: &Network<T>,
    x0: Tensor<T>,
    label: usize,
    opts: &EngineOptions,
    mixed: bool,
    run: &mut Run<'_, '_, T>,
) -> Result<()> {
    let head = net.head();
    run.ledger.begin_window();
    let (h0, head_grad) = if mixed {
        let out = input_grad_reverse(net, &x0, label)?;
        (out.h0, Some(out.head_grad))
    } else {
        opts.check_budget(estimate(net))?;
        (input_grad_forward(net, &x0, label, opts.phase1_chunk)?, None)
    };
    run.report.phase1_residual_theta_peak = Some(run.ledger.window_peak_bytes(AllocTag::ResidualTheta));
    run.report.phase1_peak_tracked_bytes = Some(run.ledger.window_peak_tracked_bytes());
    run.report.input_grad = Some(h0.to_f64());

    let out = stream(net, x0, h0, run)?;
    run.report.max_live_trunk_grads = Some(out.max_live_grads);
    run.report.output_grad = Some(out.h_last.to_f64());
    out.h_last.free()?;

    let cache = head.cache(&out.x_last, label)?;
    run.report.loss = cache.loss.as_f64();
    run.report.head_grad = match head_grad {
        Some(g) => g,
        None => {
            // Head parameters by one tangent per parameter, keeping the strategy free of
            // reverse passes.
            let mut hg = Tensor::zeros(&run.ledger, &[head.n_params()], AllocTag::Gradient)?;
            for p in 0..head.n_params() {
                hg.data_mut()[p] = head.jvp_params(&cache, ParamTangent::Basis(p))?;
            }
            let v = hg.to_f64();
            hg.free()?;
            v
        }
    };
    cache.free()?;
    out.x_last.free()?;
    Ok(())
}

/// `dJ/dx_0` by forward-mode basis passes.
pub fn phase1_forward<T: Real>(net: &Network<T>, x0: &[T], label: usize, opts: &EngineOptions) -> Result<Vec<f64>> {
    opts.check_budget(estimate(net))?;
    let ledger = Ledger::new();
    let x = net.input_tensor(&ledger, x0)?;
    let h0 = input_grad_forward(net, &x, label, opts.phase1_chunk)?;
    Ok(h0.to_f64())
}

/// `dJ/dx_0` and the head gradient by a reverse pass over input residuals only.
pub fn phase1_reverse<T: Real>(net: &Network<T>, x0: &[T], label: usize) -> Result<Phase1> {
    let ledger = Ledger::new();
    let x = net.input_tensor(&ledger, x0)?;
    ledger.reset_peaks();
    let out = input_grad_reverse(net, &x, label)?;
    Ok(Phase1 {
        h0: out.h0.to_f64(),
        head_grad: out.head_grad,
        loss: out.loss,
        residual_theta_peak: ledger.peak_bytes(AllocTag::ResidualTheta),
        peak_tracked_bytes: ledger.peak_tracked_bytes(),
    })
}

/// Result of the forward cotangent recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase2 {
    pub layer_grads: Vec<Vec<f64>>,
    pub output_grad: Vec<f64>,
    pub max_live_trunk_grads: usize,
}

/// Runs the forward recursion from a given `h_0`, which must be `dJ/dx_0` for the
/// gradients to mean anything.
pub fn phase2<T: Real>(net: &Network<T>, x0: &[T], h0: &[T]) -> Result<Phase2> {
    let ledger = Ledger::new();
    let x = net.input_tensor(&ledger, x0)?;
    let h = Tensor::from_vec(&ledger, x.shape(), h0.to_vec(), AllocTag::Cotangent)?;
    let mut r = Run::new(super::StrategyId::Moonwalk, net, ledger.clone(), None);
    let out = stream(net, x, h, &mut r)?;
    Ok(Phase2 {
        layer_grads: r.report.layer_grads,
        output_grad: out.h_last.to_f64(),
        max_live_trunk_grads: out.max_live_grads,
    })
}
