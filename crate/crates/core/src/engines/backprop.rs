//! Reverse mode with every layer's linearization cached during the forward pass.

use super::Run;
use crate::error::Result;
use crate::layers::{Keep, ResidualTheta, ResidualX};
use crate::network::Network;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub(super) fn run<T: Real>(net: &Network<T>, x0: Tensor<T>, label: usize, run: &mut Run<'_, '_, T>) -> Result<()> {
    let layers = net.layers();
    let mut stored = Vec::with_capacity(layers.len());
    let mut x = x0;
    for (i, layer) in layers.iter().enumerate() {
        let (y, res) = layer.forward_residuals(&x, Keep::ALL).map_err(|e| e.at_layer(i))?;
        x.free()?;
        x = y;
        stored.push(res);
    }

    let cache = net.head().cache(&x, label)?;
    run.report.loss = cache.loss.as_f64();
    let mut v = net.head().input_grad(&cache, &x)?;
    let head_grad = net.head().param_grad(&cache, &x)?;
    cache.free()?;
    x.free()?;

    // All trunk gradients stay alive until the reverse pass is done.
    let mut grads = Vec::new();
    for (i, layer) in layers.iter().enumerate().rev() {
        let res = stored.pop().expect("one residual set per layer");
        let rx = res.x.unwrap_or(ResidualX::Nothing);
        let rt = res.theta.unwrap_or(ResidualTheta::Nothing);
        if let Some(g) = layer.vjp_params(&rt, &v).map_err(|e| e.at_layer(i))? {
            grads.push((i, g));
        }
        let next = layer.vjp_input(&rx, &v).map_err(|e| e.at_layer(i))?;
        v.free()?;
        v = next;
        rx.free()?;
        rt.free()?;
    }
    for (i, g) in grads.into_iter().rev() {
        run.emit(i, &g);
        g.free()?;
    }
    run.report.input_grad = Some(v.to_f64());
    v.free()?;
    run.report.head_grad = head_grad.to_f64();
    head_grad.free()?;
    Ok(())
}
