//! Elementwise invertible activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::AllocTag;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Derivatives below this magnitude make the inverse-Jacobian product meaningless.
pub const SINGULAR_DERIVATIVE: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Tanh,
    LeakyRelu { alpha: f64 },
}

impl ActivationKind {
    pub const DEFAULT_ALPHA: f64 = 0.1;

    pub fn leaky_relu() -> Self {
        ActivationKind::LeakyRelu { alpha: Self::DEFAULT_ALPHA }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::LeakyRelu { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::InvalidSpec(format!("leaky relu slope must be positive, got {alpha}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationLayer {
    kind: ActivationKind,
}

impl ActivationLayer {
    pub fn new(kind: ActivationKind) -> Result<Self> {
        kind.validate()?;
        Ok(ActivationLayer { kind })
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn apply<T: Real>(&self, x: T) -> T {
        match self.kind {
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::LeakyRelu { alpha } => {
                if x >= T::zero() {
                    x
                } else {
                    T::of(alpha) * x
                }
            }
        }
    }

    pub fn invert<T: Real>(&self, y: T) -> Result<T> {
        match self.kind {
            ActivationKind::Tanh => {
                if !(y.abs() < T::one()) {
                    return Err(Error::Domain { op: "tanh inverse", value: y.as_f64() });
                }
                Ok(y.atanh())
            }
            ActivationKind::LeakyRelu { alpha } => Ok(if y >= T::zero() { y } else { y / T::of(alpha) }),
        }
    }

    /// `f'(x)` from the pre-activation value.
    pub fn derivative<T: Real>(&self, x: T) -> T {
        match self.kind {
            // 1 - tanh^2 cancels badly once tanh rounds to 1; this form does not.
            ActivationKind::Tanh => {
                let e = (T::of(-2.0) * x.abs()).exp();
                let d = T::one() + e;
                T::of(4.0) * e / (d * d)
            }
            ActivationKind::LeakyRelu { alpha } => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::of(alpha)
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.map(|v| self.apply(v)).map(|t| t.with_tag(AllocTag::Activation))
    }

    pub fn inverse<T: Real>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let data = y.data().iter().map(|&v| self.invert(v)).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(y.ledger(), y.shape(), data, AllocTag::Activation)
    }

    /// `u * f'(x)`; the same diagonal serves both products.
    pub fn scale_by_derivative<T: Real>(&self, x: &Tensor<T>, u: &Tensor<T>, tag: AllocTag) -> Result<Tensor<T>> {
        let mut out = x.zip_map(u, |xv, uv| uv * self.derivative(xv))?;
        out.retag(tag);
        Ok(out)
    }

    /// `h / f'(x)`.
    pub fn vijp<T: Real>(&self, x: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != h.shape() {
            return Err(Error::ShapeMismatch { op: "vijp_input", expected: x.shape().to_vec(), actual: h.shape().to_vec() });
        }
        let mut data = Vec::with_capacity(h.len());
        for (&xv, &hv) in x.data().iter().zip(h.data()) {
            let d = self.derivative(xv);
            if d.as_f64().abs() < SINGULAR_DERIVATIVE {
                return Err(Error::Singular { layer: 0, derivative: d.as_f64() });
            }
            data.push(hv / d);
        }
        Tensor::from_vec(h.ledger(), h.shape(), data, AllocTag::Cotangent)
    }
}
