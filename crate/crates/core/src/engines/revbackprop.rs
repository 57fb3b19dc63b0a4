//! Reverse mode that reconstructs each layer input from its output.

use super::Run;
use crate::error::Result;
use crate::network::Network;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub(super) fn run<T: Real>(net: &Network<T>, x0: Tensor<T>, label: usize, run: &mut Run<'_, '_, T>) -> Result<()> {
    let layers = net.layers();
    let mut x = x0;
    for (i, layer) in layers.iter().enumerate() {
        let y = layer.forward(&x).map_err(|e| e.at_layer(i))?;
        x.free()?;
        x = y;
    }

    let cache = net.head().cache(&x, label)?;
    run.report.loss = cache.loss.as_f64();
    let mut v = net.head().input_grad(&cache, &x)?;
    let head_grad = net.head().param_grad(&cache, &x)?;
    cache.free()?;

    for (i, layer) in layers.iter().enumerate().rev() {
        let prev = layer.inverse(&x).map_err(|e| e.at_layer(i))?;
        x.free()?;
        let (next, g) = layer.reverse_from_input(&prev, &v).map_err(|e| e.at_layer(i))?;
        v.free()?;
        v = next;
        x = prev;
        if let Some(g) = g {
            run.emit(i, &g);
            g.free()?;
        }
    }
    x.free()?;
    run.report.input_grad = Some(v.to_f64());
    v.free()?;
    run.report.head_grad = head_grad.to_f64();
    head_grad.free()?;
    Ok(())
}
