//! Projected forward mode: one tangent pass along a random parameter direction.
//!
//! With `u` drawn from a standard Gaussian, `(dJ/dtheta . u) u` is an unbiased estimate
//! of the gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EngineOptions, Run};
use crate::error::Result;
use crate::layers::subnet::sample_into;
use crate::layers::ParamTangent;
use crate::ledger::AllocTag;
use crate::network::Network;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub(super) fn run<T: Real>(
    net: &Network<T>,
    x0: Tensor<T>,
    label: usize,
    opts: &EngineOptions,
    run: &mut Run<'_, '_, T>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    run.report.stochastic = true;
    run.report.tangent_seed = Some(opts.seed);
    // The direction is drawn straight into the buffers that end up holding the
    // estimate, so it is accounted as gradient storage.
    let mut dirs: Vec<Option<Tensor<T>>> = Vec::with_capacity(net.layers().len());
    let mut x = x0;
    let mut t: Option<Tensor<T>> = None;
    for (j, layer) in net.layers().iter().enumerate() {
        let d = layer.n_params();
        let u = if d > 0 {
            let mut u = Tensor::zeros(&run.ledger, &[d], AllocTag::Gradient)?;
            sample_into(u.data_mut(), 1.0, &mut rng);
            Some(u)
        } else {
            None
        };
        let dtheta = u.as_ref().map_or(ParamTangent::None, |u| ParamTangent::Dense(u.data()));
        let (y, tn) = layer.tangent_step(&x, t.as_ref(), dtheta).map_err(|e| e.at_layer(j))?;
        x.free()?;
        if let Some(t) = t.take() {
            t.free()?;
        }
        x = y;
        t = Some(tn);
        dirs.push(u);
    }
    let head = net.head();
    let mut uh = Tensor::zeros(&run.ledger, &[head.n_params()], AllocTag::Gradient)?;
    sample_into(uh.data_mut(), 1.0, &mut rng);
    let cache = head.cache(&x, label)?;
    run.report.loss = cache.loss.as_f64();
    let t = t.expect("network has at least one layer");
    let s = head.jvp_input(&cache, &t)? + head.jvp_params(&cache, ParamTangent::Dense(uh.data()))?;
    cache.free()?;
    t.free()?;
    x.free()?;
    for (j, u) in dirs.into_iter().enumerate() {
        if let Some(mut u) = u {
            u.data_mut().iter_mut().for_each(|v| *v *= s);
            run.emit(j, &u);
            u.free()?;
        }
    }
    uh.data_mut().iter_mut().for_each(|v| *v *= s);
    run.report.head_grad = uh.to_f64();
    uh.free()?;
    Ok(())
}
