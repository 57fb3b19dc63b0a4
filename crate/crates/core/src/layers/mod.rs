//! Trunk layers and the loss head.
//!
//! Every trunk layer maps `H x W x C` tensors bijectively and exposes the linearizations
//! used by the gradient strategies:
//!
//! | operator            | meaning            |
//! |---------------------|--------------------|
//! | `jvp_input`         | `J_x u`            |
//! | `jvp_params`        | `J_theta u_theta`  |
//! | `vjp_input`         | `v J_x`            |
//! | `vjp_params`        | `v J_theta`        |
//! | `vijp_input`        | `h J_x^{-1}`       |
//!
//! `advance`, `tangent_step` and `reverse_from_input` fuse a forward evaluation with
//! one of the products so streaming strategies evaluate each subnet once per pixel.

pub mod activation;
pub mod coupling;
pub mod downsample;
pub mod head;
pub mod subnet;

use crate::error::{Error, Result};
use crate::ledger::AllocTag;
use crate::scalar::Real;
use crate::tensor::{Mask, Tensor};

pub use activation::{ActivationKind, ActivationLayer};
pub use coupling::{CouplingLayer, Half};
pub use downsample::DownsampleLayer;
pub use head::{Head, HeadCache};
pub use subnet::{InitSpec, ParamTangent, Subnet, SubnetSpec};

/// Which linearization data a forward pass should keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Keep {
    pub x: bool,
    pub theta: bool,
}

impl Keep {
    pub const NONE: Keep = Keep { x: false, theta: false };
    pub const X: Keep = Keep { x: true, theta: false };
    pub const ALL: Keep = Keep { x: true, theta: true };
}

/// Data needed to apply `J_x` after the forward pass has moved on.
#[derive(Debug)]
pub enum ResidualX<T: Real> {
    /// ReLU gates of every hidden unit at every pixel, one byte each.
    Gates(Mask),
    PreActivation(Tensor<T>),
    Nothing,
}

/// Data needed, on top of [`ResidualX`], to apply `J_theta`.
#[derive(Debug)]
pub enum ResidualTheta<T: Real> {
    /// Inputs of every dense layer of the subnet at every pixel.
    DenseInputs(Tensor<T>),
    Nothing,
}

#[derive(Debug)]
pub struct Residuals<T: Real> {
    pub x: Option<ResidualX<T>>,
    pub theta: Option<ResidualTheta<T>>,
}

impl<T: Real> ResidualX<T> {
    pub fn free(self) -> Result<()> {
        match self {
            ResidualX::Gates(m) => m.free(),
            ResidualX::PreActivation(t) => t.free(),
            ResidualX::Nothing => Ok(()),
        }
    }
}

impl<T: Real> ResidualTheta<T> {
    pub fn free(self) -> Result<()> {
        match self {
            ResidualTheta::DenseInputs(t) => t.free(),
            ResidualTheta::Nothing => Ok(()),
        }
    }
}

impl<T: Real> Residuals<T> {
    fn nothing(keep: Keep) -> Self {
        Residuals {
            x: keep.x.then_some(ResidualX::Nothing),
            theta: keep.theta.then_some(ResidualTheta::Nothing),
        }
    }

    pub fn free(self) -> Result<()> {
        if let Some(x) = self.x {
            x.free()?;
        }
        if let Some(t) = self.theta {
            t.free()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Coupling(CouplingLayer<T>),
    Activation(ActivationLayer),
    Downsample(DownsampleLayer),
}

fn missing(what: &'static str) -> Error {
    Error::MissingResidual { layer: 0, what }
}

impl<T: Real> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Coupling(_) => "coupling",
            Layer::Activation(a) => match a.kind() {
                ActivationKind::Tanh => "tanh",
                ActivationKind::LeakyRelu { .. } => "leaky_relu",
            },
            Layer::Downsample(_) => "downsample",
        }
    }

    pub fn is_coupling(&self) -> bool {
        matches!(self, Layer::Coupling(_))
    }

    pub fn n_params(&self) -> usize {
        match self {
            Layer::Coupling(c) => c.n_params(),
            _ => 0,
        }
    }

    pub fn params(&self) -> &[T] {
        match self {
            Layer::Coupling(c) => c.params(),
            _ => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        match self {
            Layer::Coupling(c) => c.params_mut(),
            _ => &mut [],
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Coupling(c) => Layer::Coupling(c.cast()),
            Layer::Activation(a) => Layer::Activation(*a),
            Layer::Downsample(d) => Layer::Downsample(*d),
        }
    }

    pub fn out_shape(&self, s: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match self {
            Layer::Coupling(c) if c.channels() != s.2 => Err(Error::InvalidSpec(format!(
                "coupling expects {} channels, got {}",
                c.channels(),
                s.2
            ))),
            Layer::Downsample(d) => d.out_shape(s),
            _ => Ok(s),
        }
    }

    /// Rough multiply-add count of one forward evaluation.
    pub fn flops(&self, s: (usize, usize, usize)) -> usize {
        let px = s.0 * s.1;
        match self {
            Layer::Coupling(c) => c.flops(px),
            _ => px * s.2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Coupling(c) => c.forward(x),
            Layer::Activation(a) => a.forward(x),
            Layer::Downsample(d) => d.forward(x, AllocTag::Activation),
        }
    }

    pub fn forward_residuals(&self, x: &Tensor<T>, keep: Keep) -> Result<(Tensor<T>, Residuals<T>)> {
        match self {
            Layer::Coupling(c) => c.forward_residuals(x, keep),
            Layer::Activation(a) => {
                let y = a.forward(x)?;
                let mut res = Residuals::nothing(keep);
                if keep.x {
                    res.x = Some(ResidualX::PreActivation(x.copy(AllocTag::ResidualX)?));
                }
                Ok((y, res))
            }
            Layer::Downsample(d) => Ok((d.forward(x, AllocTag::Activation)?, Residuals::nothing(keep))),
        }
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Coupling(c) => c.inverse(y),
            Layer::Activation(a) => a.inverse(y),
            Layer::Downsample(d) => d.inverse(y, AllocTag::Activation),
        }
    }

    /// `(f(x), J_x u + J_theta dtheta)`; a missing `u` is the zero tangent.
    pub fn tangent_step(
        &self,
        x: &Tensor<T>,
        u: Option<&Tensor<T>>,
        dtheta: ParamTangent<'_, T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if let Layer::Coupling(c) = self {
            return c.tangent_step(x, u, dtheta);
        }
        match dtheta {
            ParamTangent::None => {}
            ParamTangent::Dense(d) if d.is_empty() => {}
            ParamTangent::Dense(d) => return Err(Error::LengthMismatch { op: "jvp_params", expected: 0, actual: d.len() }),
            ParamTangent::Basis(i) => return Err(Error::LengthMismatch { op: "jvp_params", expected: 0, actual: i + 1 }),
        }
        let y = self.forward(x)?;
        let t = match u {
            Some(u) => self.jvp_input(x, u)?,
            None => y.zeros_like(AllocTag::Tangent)?,
        };
        Ok((y, t))
    }

    pub fn jvp_input(&self, x: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Coupling(c) => c.jvp_input(x, u),
            Layer::Activation(a) => a.scale_by_derivative(x, u, AllocTag::Tangent),
            Layer::Downsample(d) => d.forward(u, AllocTag::Tangent),
        }
    }

    pub fn jvp_params(&self, x: &Tensor<T>, dtheta: ParamTangent<'_, T>) -> Result<Tensor<T>> {
        let (y, t) = self.tangent_step(x, None, dtheta)?;
        y.free()?;
        Ok(t)
    }

    pub fn vjp_input(&self, res: &ResidualX<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        match (self, res) {
            (Layer::Coupling(c), ResidualX::Gates(m)) => c.vjp_input(m, v),
            (Layer::Coupling(_), _) => Err(missing("gate")),
            (Layer::Activation(a), ResidualX::PreActivation(x)) => a.scale_by_derivative(x, v, AllocTag::Cotangent),
            (Layer::Activation(_), _) => Err(missing("pre-activation")),
            (Layer::Downsample(d), _) => d.inverse(v, AllocTag::Cotangent),
        }
    }

    /// `v J_theta`, or `None` for parameter-free layers.
    pub fn vjp_params(&self, res: &ResidualTheta<T>, v: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        match (self, res) {
            (Layer::Coupling(c), ResidualTheta::DenseInputs(a)) => c.vjp_params(a, v).map(Some),
            (Layer::Coupling(_), _) => Err(missing("dense-input")),
            _ => Ok(None),
        }
    }

    /// `h J_x^{-1}` from the layer input, without evaluating the inverse.
    pub fn vijp_input(&self, x: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Coupling(c) => c.vijp_input(x, h),
            Layer::Activation(a) => a.vijp(x, h),
            Layer::Downsample(d) => d.forward(h, AllocTag::Cotangent),
        }
    }

    /// `(f(x), h J_x^{-1}, h J_x^{-1} J_theta)`.
    pub fn advance(&self, x: &Tensor<T>, h: &Tensor<T>, with_grad: bool) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
        match self {
            Layer::Coupling(c) => c.advance(x, h, with_grad),
            _ => {
                let hn = self.vijp_input(x, h)?;
                Ok((self.forward(x)?, hn, None))
            }
        }
    }

    /// `(v J_x, v J_theta)` with the linearization recomputed from the input `x`.
    pub fn reverse_from_input(&self, x: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match self {
            Layer::Coupling(c) => c.reverse_from_input(x, v).map(|(a, g)| (a, Some(g))),
            Layer::Activation(a) => Ok((a.scale_by_derivative(x, v, AllocTag::Cotangent)?, None)),
            Layer::Downsample(d) => Ok((d.inverse(v, AllocTag::Cotangent)?, None)),
        }
    }
}
