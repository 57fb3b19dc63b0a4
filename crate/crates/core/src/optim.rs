//! First-order optimizers over groups of parameters.
//!
//! Optimizer state lives outside any gradient ledger, so moment buffers never count
//! towards a strategy's peak.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::adam(1e-3)
    }
}

impl OptimizerSpec {
    pub fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam { lr, beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr } | OptimizerSpec::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerSpec::Sgd { .. } => OptimizerSpec::Sgd { lr },
            OptimizerSpec::Adam { beta1, beta2, eps, .. } => OptimizerSpec::Adam { lr, beta1, beta2, eps },
        }
    }

    /// A zero rate is allowed; it turns training into evaluation.
    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        if let OptimizerSpec::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::InvalidConfig("adam needs betas in [0, 1) and a positive epsilon".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// `lr * rate^epoch`.
    Exponential { rate: f64 },
}

impl Schedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Exponential { rate } => base * rate.powi(epoch as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Exponential { rate } if !(rate > 0.0 && rate <= 1.0) => {
                Err(Error::InvalidConfig(format!("decay rate must be in (0, 1], got {rate}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    /// State for parameter groups of the given sizes.
    pub fn new(spec: OptimizerSpec, sizes: &[usize]) -> Self {
        let (m, v) = match spec {
            OptimizerSpec::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerSpec::Adam { .. } => (
                sizes.iter().map(|&n| vec![0.0; n]).collect(),
                sizes.iter().map(|&n| vec![0.0; n]).collect(),
            ),
        };
        Optimizer { spec, step: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once before updating the groups of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update<T: Real>(&mut self, group: usize, params: &mut [T], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len(), "gradient length differs from parameter group");
        match self.spec {
            OptimizerSpec::Sgd { .. } => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p = T::of(p.as_f64() - lr * g);
                }
            }
            OptimizerSpec::Adam { beta1, beta2, eps, .. } => {
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v) = (&mut self.m[group], &mut self.v[group]);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    params[i] = T::of(params[i].as_f64() - lr * mh / (vh.sqrt() + eps));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_on_quadratic() {
        // f(p) = p^2 / 2, gradient p.
        let mut opt = Optimizer::new(OptimizerSpec::Sgd { lr: 0.1 }, &[1]);
        let mut p = [2.0f64];
        opt.begin_step();
        opt.update(0, &mut p, &[2.0], 0.1);
        assert_eq!(p[0], 1.8);
    }

    #[test]
    fn exponential_schedule() {
        let s = Schedule::Exponential { rate: 0.5 };
        assert_eq!(s.lr_at(1.0, 0), 1.0);
        assert_eq!(s.lr_at(1.0, 3), 0.125);
    }
}
