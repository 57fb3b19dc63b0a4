//! Forward mode with one tangent pass per parameter.

use super::{EngineOptions, Run};
use crate::error::Result;
use crate::layers::ParamTangent;
use crate::ledger::AllocTag;
use crate::network::Network;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Multiply-adds of one full gradient, counting a tangent step as two forward passes.
pub(crate) fn estimate<T: Real>(net: &Network<T>) -> f64 {
    let trunk: f64 = net
        .layers()
        .iter()
        .enumerate()
        .map(|(j, l)| l.n_params() as f64 * 2.0 * net.flops_from(j) as f64)
        .sum();
    trunk + net.head().n_params() as f64
}

pub(super) fn run<T: Real>(
    net: &Network<T>,
    x0: Tensor<T>,
    label: usize,
    opts: &EngineOptions,
    run: &mut Run<'_, '_, T>,
) -> Result<()> {
    opts.check_budget(estimate(net))?;
    let layers = net.layers();
    let head = net.head();
    let mut x = x0;
    for (j, layer) in layers.iter().enumerate() {
        let d = layer.n_params();
        if d > 0 {
            let mut g = Tensor::zeros(&run.ledger, &[d], AllocTag::Gradient)?;
            for p in 0..d {
                let (mut y, mut t) = layer.tangent_step(&x, None, ParamTangent::Basis(p)).map_err(|e| e.at_layer(j))?;
                for (k, next) in layers.iter().enumerate().skip(j + 1) {
                    let (y2, t2) = next.tangent_step(&y, Some(&t), ParamTangent::None).map_err(|e| e.at_layer(k))?;
                    y.free()?;
                    t.free()?;
                    y = y2;
                    t = t2;
                }
                let cache = head.cache(&y, label)?;
                g.data_mut()[p] = head.jvp_input(&cache, &t)?;
                cache.free()?;
                y.free()?;
                t.free()?;
            }
            run.emit(j, &g);
            g.free()?;
        }
        let y = layer.forward(&x).map_err(|e| e.at_layer(j))?;
        x.free()?;
        x = y;
    }
    let cache = head.cache(&x, label)?;
    run.report.loss = cache.loss.as_f64();
    let mut hg = Tensor::zeros(&run.ledger, &[head.n_params()], AllocTag::Gradient)?;
    for p in 0..head.n_params() {
        hg.data_mut()[p] = head.jvp_params(&cache, ParamTangent::Basis(p))?;
    }
    cache.free()?;
    x.free()?;
    run.report.head_grad = hg.to_f64();
    hg.free()?;
    Ok(())
}
