//! Additive coupling: `y_c = x_c`, `y_t = x_t + F(x_c)` where `x_c` is the conditioning
//! half of the channels and `x_t` the transformed half.
//!
//! With `A = dF/dx_c` per pixel the input Jacobian is block lower-triangular,
//! `[[I, 0], [A, I]]`, and its inverse is `[[I, 0], [-A, I]]`. Every linearization
//! below is one subnet pass per pixel.

use serde::{Deserialize, Serialize};

use super::subnet::{ParamTangent, Subnet};
use super::{Keep, ResidualTheta, ResidualX, Residuals};
use crate::error::{Error, Result};
use crate::ledger::{AllocTag, Ledger};
use crate::scalar::Real;
use crate::tensor::{Mask, Tensor};

/// Which channel half conditions the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer<T> {
    channels: usize,
    conditioner: Half,
    subnet: Subnet<T>,
    /// Test hook: use `+A` instead of `-A` in the inverse-Jacobian product.
    pub(crate) flip_vijp: bool,
}

/// Per-operation scratch, charged to the ledger as workspace.
struct Scratch<T: Real> {
    vals: Tensor<T>,
    gates: Mask,
    acts_len: usize,
    buf_len: usize,
    half: usize,
}

impl<T: Real> Scratch<T> {
    fn split(&mut self) -> (&mut [T], &mut [u8], &mut [T], &mut [T], &mut [T]) {
        let (acts, rest) = self.vals.data_mut().split_at_mut(self.acts_len);
        let (buf, rest) = rest.split_at_mut(self.buf_len);
        let (f, g) = rest.split_at_mut(self.half);
        (acts, self.gates.data_mut(), buf, f, g)
    }

    fn free(self) -> Result<()> {
        self.vals.free()?;
        self.gates.free()
    }
}

impl<T: Real> CouplingLayer<T> {
    pub fn new(channels: usize, conditioner: Half, subnet: Subnet<T>) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::InvalidSpec(format!("coupling needs an even channel count, got {channels}")));
        }
        if subnet.io_width() != channels / 2 {
            return Err(Error::InvalidSpec(format!(
                "subnet width {} does not match half of {channels} channels",
                subnet.io_width()
            )));
        }
        Ok(CouplingLayer { channels, conditioner, subnet, flip_vijp: false })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn conditioner(&self) -> Half {
        self.conditioner
    }

    pub fn subnet(&self) -> &Subnet<T> {
        &self.subnet
    }

    pub fn n_params(&self) -> usize {
        self.subnet.n_params()
    }

    pub fn params(&self) -> &[T] {
        self.subnet.params()
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        self.subnet.params_mut()
    }

    pub fn cast<U: Real>(&self) -> CouplingLayer<U> {
        CouplingLayer {
            channels: self.channels,
            conditioner: self.conditioner,
            subnet: self.subnet.cast(),
            flip_vijp: self.flip_vijp,
        }
    }

    /// Offsets of the conditioning and transformed halves within a pixel.
    fn halves(&self) -> (usize, usize) {
        let h = self.channels / 2;
        match self.conditioner {
            Half::Low => (0, h),
            Half::High => (h, 0),
        }
    }

    fn pixels(&self, x: &Tensor<T>, op: &'static str) -> Result<usize> {
        let (h, w, c) = x.hwc()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch { op, expected: vec![h, w, self.channels], actual: x.shape().to_vec() });
        }
        Ok(h * w)
    }

    fn scratch(&self, ledger: &Ledger) -> Result<Scratch<T>> {
        let acts_len = self.subnet.act_units();
        let buf_len = self.subnet.buf_len();
        let half = self.channels / 2;
        let vals = Tensor::zeros(ledger, &[acts_len + buf_len + 2 * half], AllocTag::Workspace)?;
        let gates = Mask::zeros(ledger, self.subnet.hidden_units().max(1), AllocTag::Workspace);
        Ok(Scratch { vals, gates, acts_len, buf_len, half })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_residuals(x, Keep::NONE)?.0)
    }

    /// Forward pass that optionally materializes the input-linearization data (ReLU
    /// gates, one byte per unit) and the parameter-linearization data (dense-layer
    /// inputs).
    pub fn forward_residuals(&self, x: &Tensor<T>, keep: Keep) -> Result<(Tensor<T>, Residuals<T>)> {
        let px = self.pixels(x, "coupling forward")?;
        let (hh, ww, _) = x.hwc()?;
        let ledger = x.ledger();
        let mut y = x.copy(AllocTag::Activation)?;
        let units = self.subnet.act_units();
        let hidden = self.subnet.hidden_units();
        let mut masks = keep.x.then(|| Mask::zeros(ledger, (px * hidden).max(1), AllocTag::ResidualX));
        let mut inputs = if keep.theta {
            Some(Tensor::zeros(ledger, &[hh, ww, units], AllocTag::ResidualTheta)?)
        } else {
            None
        };
        let mut s = self.scratch(ledger)?;
        let (c0, t0) = self.halves();
        let half = self.channels / 2;
        {
            let (acts, gates, _, f, _) = s.split();
            let xd = x.data();
            let yd = y.data_mut();
            for p in 0..px {
                let base = p * self.channels;
                let x1 = &xd[base + c0..base + c0 + half];
                self.subnet.forward_px(x1, acts, gates, f);
                for k in 0..half {
                    yd[base + t0 + k] += f[k];
                }
                if let Some(m) = masks.as_mut() {
                    m.data_mut()[p * hidden..(p + 1) * hidden].copy_from_slice(&gates[..hidden]);
                }
                if let Some(a) = inputs.as_mut() {
                    a.data_mut()[p * units..(p + 1) * units].copy_from_slice(acts);
                }
            }
        }
        s.free()?;
        let res = Residuals {
            x: masks.map(ResidualX::Gates),
            theta: inputs.map(ResidualTheta::DenseInputs),
        };
        Ok((y, res))
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let px = self.pixels(y, "coupling inverse")?;
        let mut x = y.copy(AllocTag::Activation)?;
        let mut s = self.scratch(y.ledger())?;
        let (c0, t0) = self.halves();
        let half = self.channels / 2;
        {
            let (acts, gates, _, f, _) = s.split();
            let yd = y.data();
            let xd = x.data_mut();
            for p in 0..px {
                let base = p * self.channels;
                self.subnet.forward_px(&yd[base + c0..base + c0 + half], acts, gates, f);
                for k in 0..half {
                    xd[base + t0 + k] -= f[k];
                }
            }
        }
        s.free()?;
        Ok(x)
    }

    /// Joint forward and tangent pass: returns `(f(x), J_x u + J_theta dtheta)`.
    pub fn tangent_step(
        &self,
        x: &Tensor<T>,
        u: Option<&Tensor<T>>,
        dtheta: ParamTangent<'_, T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let px = self.pixels(x, "coupling tangent")?;
        if let ParamTangent::Dense(d) = dtheta {
            if d.len() != self.n_params() {
                return Err(Error::LengthMismatch { op: "jvp_params", expected: self.n_params(), actual: d.len() });
            }
        }
        if let Some(u) = u {
            if u.shape() != x.shape() {
                return Err(Error::ShapeMismatch { op: "jvp_input", expected: x.shape().to_vec(), actual: u.shape().to_vec() });
            }
        }
        let mut y = x.copy(AllocTag::Activation)?;
        let mut t = match u {
            Some(u) => u.copy(AllocTag::Tangent)?,
            None => x.zeros_like(AllocTag::Tangent)?,
        };
        let mut s = self.scratch(x.ledger())?;
        let (c0, t0) = self.halves();
        let half = self.channels / 2;
        {
            let (acts, gates, buf, f, df) = s.split();
            let xd = x.data();
            let yd = y.data_mut();
            let td = t.data_mut();
            for p in 0..px {
                let base = p * self.channels;
                self.subnet.forward_px(&xd[base + c0..base + c0 + half], acts, gates, f);
                let du = u.map(|u| &u.data()[base + c0..base + c0 + half]);
                self.subnet.tangent_px(acts, gates, du, dtheta, buf, df);
                for k in 0..half {
                    yd[base + t0 + k] += f[k];
                    td[base + t0 + k] += df[k];
                }
            }
        }
        s.free()?;
        Ok((y, t))
    }

    pub fn jvp_input(&self, x: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, t) = self.tangent_step(x, Some(u), ParamTangent::None)?;
        y.free()?;
        Ok(t)
    }

    pub fn jvp_params(&self, x: &Tensor<T>, dtheta: ParamTangent<'_, T>) -> Result<Tensor<T>> {
        let (y, t) = self.tangent_step(x, None, dtheta)?;
        y.free()?;
        Ok(t)
    }

    pub fn vjp_input(&self, gates_res: &Mask, v: &Tensor<T>) -> Result<Tensor<T>> {
        let px = self.pixels(v, "coupling vjp_input")?;
        let hidden = self.subnet.hidden_units();
        if gates_res.len() != (px * hidden).max(1) {
            return Err(Error::LengthMismatch { op: "vjp_input gates", expected: px * hidden, actual: gates_res.len() });
        }
        let mut out = v.copy(AllocTag::Cotangent)?;
        let mut s = self.scratch(v.ledger())?;
        let (c0, t0) = self.halves();
        let half = self.channels / 2;
        {
            let (_, _, buf, dx, _) = s.split();
            let vd = v.data();
            let od = out.data_mut();
            let gd = gates_res.data();
            for p in 0..px {
                let base = p * self.channels;
                let gates = &gd[p * hidden..(p + 1) * hidden];
                self.subnet.reverse_px(None, gates, &vd[base + t0..base + t0 + half], buf, None, Some(dx));
                for k in 0..half {
                    od[base + c0 + k] += dx[k];
                }
            }
        }
        s.free()?;
        Ok(out)
    }

    pub fn vjp_params(&self, inputs: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let px = self.pixels(v, "coupling vjp_params")?;
        let units = self.subnet.act_units();
        let hidden = self.subnet.hidden_units();
        let c_units = self.channels / 2;
        if inputs.len() != px * units {
            return Err(Error::LengthMismatch { op: "vjp_params inputs", expected: px * units, actual: inputs.len() });
        }
        let mut grad = Tensor::zeros(v.ledger(), &[self.n_params()], AllocTag::Gradient)?;
        let mut s = self.scratch(v.ledger())?;
        let t0 = self.halves().1;
        let half = self.channels / 2;
        {
            let (_, gates, buf, _, _) = s.split();
            let vd = v.data();
            let ad = inputs.data();
            let gd = grad.data_mut();
            for p in 0..px {
                let acts = &ad[p * units..(p + 1) * units];
                // A hidden unit was open iff its stored post-ReLU value is positive.
                for (g, &a) in gates[..hidden].iter_mut().zip(&acts[c_units..]) {
                    *g = (a > T::zero()) as u8;
                }
                let base = p * self.channels;
                self.subnet.reverse_px(Some(acts), gates, &vd[base + t0..base + t0 + half], buf, Some(gd), None);
            }
        }
        s.free()?;
        Ok(grad)
    }

    /// `h J^{-1} = (h_c - h_t A, h_t)`, using only the forward-known input `x`.
    pub fn vijp_input(&self, x: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, out, g) = self.advance(x, h, false)?;
        debug_assert!(g.is_none());
        y.free()?;
        Ok(out)
    }

    /// One step of the forward cotangent recursion: returns `x_i = f(x)`, `h_i = h J^{-1}`
    /// and, if requested, the parameter gradient `h_i dF/dtheta`, all from a single
    /// subnet evaluation per pixel.
    pub fn advance(
        &self,
        x: &Tensor<T>,
        h: &Tensor<T>,
        with_grad: bool,
    ) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
        let px = self.pixels(x, "coupling vijp_input")?;
        if h.shape() != x.shape() {
            return Err(Error::ShapeMismatch { op: "vijp_input", expected: x.shape().to_vec(), actual: h.shape().to_vec() });
        }
        let ledger = x.ledger();
        let mut y = x.copy(AllocTag::Activation)?;
        let mut out = h.copy(AllocTag::Cotangent)?;
        let mut grad = if with_grad {
            Some(Tensor::zeros(ledger, &[self.n_params()], AllocTag::Gradient)?)
        } else {
            None
        };
        let mut s = self.scratch(ledger)?;
        let (c0, t0) = self.halves();
        let half = self.channels / 2;
        let sign = if self.flip_vijp { T::one() } else { -T::one() };
        {
            let (acts, gates, buf, f, dx) = s.split();
            let xd = x.data();
            let hd = h.data();
            let yd = y.data_mut();
            let od = out.data_mut();
            for p in 0..px {
                let base = p * self.channels;
                self.subnet.forward_px(&xd[base + c0..base + c0 + half], acts, gates, f);
                let ht = &hd[base + t0..base + t0 + half];
                self.subnet.reverse_px(
                    Some(acts),
                    gates,
                    ht,
                    buf,
                    grad.as_mut().map(|g| g.data_mut()),
                    Some(dx),
                );
                for k in 0..half {
                    yd[base + t0 + k] += f[k];
                    od[base + c0 + k] += sign * dx[k];
                }
            }
        }
        s.free()?;
        Ok((y, out, grad))
    }

    /// Reverse step recomputing the linearization from the layer input: returns
    /// `(v J_x, v J_theta)`.
    pub fn reverse_from_input(&self, x: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let px = self.pixels(x, "coupling reverse")?;
        let ledger = x.ledger();
        let mut out = v.copy(AllocTag::Cotangent)?;
        let mut grad = Tensor::zeros(ledger, &[self.n_params()], AllocTag::Gradient)?;
        let mut s = self.scratch(ledger)?;
        let (c0, t0) = self.halves();
        let half = self.channels / 2;
        {
            let (acts, gates, buf, f, dx) = s.split();
            let xd = x.data();
            let vd = v.data();
            let od = out.data_mut();
            for p in 0..px {
                let base = p * self.channels;
                self.subnet.forward_px(&xd[base + c0..base + c0 + half], acts, gates, f);
                self.subnet.reverse_px(
                    Some(acts),
                    gates,
                    &vd[base + t0..base + t0 + half],
                    buf,
                    Some(grad.data_mut()),
                    Some(dx),
                );
                for k in 0..half {
                    od[base + c0 + k] += dx[k];
                }
            }
        }
        s.free()?;
        Ok((out, grad))
    }

    pub fn flops(&self, pixels: usize) -> usize {
        pixels * self.subnet.flops_px()
    }
}
