//! Central finite differences over every parameter. Used as an oracle.

use crate::error::{Error, Result};
use crate::layers::{ActivationKind, Keep, Layer, ResidualX};
use crate::ledger::Ledger;
use crate::network::Network;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub layer_grads: Vec<Vec<f64>>,
    pub head_grad: Vec<f64>,
    /// Flat indices whose `theta +- eps` evaluations switched a ReLU gate. The loss is not
    /// differentiable across that interval, so these quotients are not derivatives.
    pub kinks: Vec<usize>,
}

impl FdGradient {
    pub fn flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.layer_grads.iter().flatten().copied().collect();
        out.extend_from_slice(&self.head_grad);
        out
    }
}

pub fn fd_gradient<T: Real>(net: &Network<T>, x0: &[T], label: usize, eps: f64) -> Result<FdGradient> {
    fd_gradient_with(net, x0, label, eps, None)
}

/// `(J(theta + eps e_i) - J(theta - eps e_i)) / 2 eps` for every parameter `i`.
pub fn fd_gradient_with<T: Real>(
    net: &Network<T>,
    x0: &[T],
    label: usize,
    eps: f64,
    flop_budget: Option<f64>,
) -> Result<FdGradient> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {eps}")));
    }
    let estimate = 2.0 * net.n_params() as f64 * net.flops_from(0) as f64;
    if let Some(budget) = flop_budget {
        if estimate > budget {
            return Err(Error::BudgetExceeded { estimate, budget });
        }
    }
    let mut work = net.clone();
    let (_, gates) = loss_and_gates(net, x0, label)?;
    let mut kinks = Vec::new();
    let mut flat = 0;
    let mut quotient = |work: &mut Network<T>, layer, p| -> Result<f64> {
        let (q, kinked) = central(work, layer, p, x0, label, eps, &gates)?;
        if kinked {
            kinks.push(flat);
        }
        flat += 1;
        Ok(q)
    };
    let mut layer_grads = Vec::with_capacity(net.layers().len());
    for li in 0..net.layers().len() {
        let d = net.layers()[li].n_params();
        let g = (0..d).map(|p| quotient(&mut work, Some(li), p)).collect::<Result<_>>()?;
        layer_grads.push(g);
    }
    let head_grad = (0..net.head().n_params()).map(|p| quotient(&mut work, None, p)).collect::<Result<_>>()?;
    Ok(FdGradient { layer_grads, head_grad, kinks })
}

/// Loss together with the on/off pattern of every piecewise-linear unit.
fn loss_and_gates<T: Real>(net: &Network<T>, x0: &[T], label: usize) -> Result<(f64, Vec<u8>)> {
    let ledger = Ledger::new();
    let mut cur = net.input_tensor(&ledger, x0)?;
    let mut gates = Vec::new();
    for layer in net.layers() {
        let (next, res) = layer.forward_residuals(&cur, Keep::X)?;
        match (layer, &res.x) {
            (Layer::Coupling(_), Some(ResidualX::Gates(m))) => gates.extend_from_slice(m.data()),
            (Layer::Activation(a), Some(ResidualX::PreActivation(z))) => {
                if let ActivationKind::LeakyRelu { .. } = a.kind() {
                    gates.extend(z.data().iter().map(|v| u8::from(*v > T::zero())));
                }
            }
            _ => {}
        }
        res.free()?;
        cur.free()?;
        cur = next;
    }
    let j = net.head().loss(&cur, label)?.as_f64();
    cur.free()?;
    Ok((j, gates))
}

fn param_mut<T: Real>(net: &mut Network<T>, layer: Option<usize>, p: usize) -> &mut T {
    match layer {
        Some(l) => &mut net.layers_mut()[l].params_mut()[p],
        None => &mut net.head_mut().params_mut()[p],
    }
}

/// The difference quotient, and whether either side saw different gates than `gates`.
fn central<T: Real>(
    net: &mut Network<T>,
    layer: Option<usize>,
    p: usize,
    x0: &[T],
    label: usize,
    eps: f64,
    gates: &[u8],
) -> Result<(f64, bool)> {
    let orig = *param_mut(net, layer, p);
    *param_mut(net, layer, p) = orig + T::of(eps);
    let (plus, g_plus) = loss_and_gates(net, x0, label)?;
    *param_mut(net, layer, p) = orig - T::of(eps);
    let (minus, g_minus) = loss_and_gates(net, x0, label)?;
    *param_mut(net, layer, p) = orig;
    Ok(((plus - minus) / (2.0 * eps), g_plus != gates || g_minus != gates))
}
