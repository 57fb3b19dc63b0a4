//! Per-pixel dense ReLU network used as the coupling function.
//!
//! The network mixes channels only (a 1x1 convolution stack). All routines here work on
//! one pixel at a time on plain slices; callers own the buffers and their accounting.
//!
//! Parameter layout, for each dense layer `l` in order: weights `W_l` (`out x in`,
//! row-major) followed by biases `b_l`.
//!
//! Activation layout (`acts`): the input of every dense layer, concatenated. `a_0` is
//! the conditioning half of the pixel, `a_l` for `l >= 1` is a post-ReLU hidden vector.
//! Gate layout (`gates`): one byte per hidden unit, `1` iff the pre-activation was
//! strictly positive.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetSpec {
    /// Number of dense layers (at least 1).
    pub depth: usize,
    pub hidden_width: usize,
}

impl Default for SubnetSpec {
    fn default() -> Self {
        SubnetSpec { depth: 2, hidden_width: 8 }
    }
}

/// Which parameter-space direction to push through a tangent pass.
#[derive(Debug, Clone, Copy)]
pub enum ParamTangent<'a, T> {
    None,
    Dense(&'a [T]),
    /// Standard basis vector `e_index`.
    Basis(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subnet<T> {
    widths: Vec<usize>,
    weight_off: Vec<usize>,
    bias_off: Vec<usize>,
    act_off: Vec<usize>,
    params: Vec<T>,
}

impl<T: Real> Subnet<T> {
    /// Zero-parameter subnet mapping `io` channels to `io` channels.
    pub fn zeros(io: usize, spec: SubnetSpec) -> Self {
        assert!(spec.depth >= 1, "subnet depth must be positive");
        let mut widths = vec![io];
        widths.extend(std::iter::repeat_n(spec.hidden_width, spec.depth - 1));
        widths.push(io);
        let mut weight_off = Vec::with_capacity(spec.depth);
        let mut bias_off = Vec::with_capacity(spec.depth);
        let mut act_off = Vec::with_capacity(spec.depth);
        let (mut p, mut a) = (0, 0);
        for l in 0..spec.depth {
            weight_off.push(p);
            p += widths[l] * widths[l + 1];
            bias_off.push(p);
            p += widths[l + 1];
            act_off.push(a);
            a += widths[l];
        }
        Subnet { widths, weight_off, bias_off, act_off, params: vec![T::zero(); p] }
    }

    /// He-style initialisation: hidden layers `N(0, gain^2 * 2/fan_in)`, the output layer
    /// `N(0, out_gain^2 / fan_in)`, biases `N(0, bias_std^2)`.
    pub fn random(io: usize, spec: SubnetSpec, init: &InitSpec, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(io, spec);
        let depth = net.depth();
        for l in 0..depth {
            let fan_in = net.widths[l] as f64;
            let std = if l + 1 == depth {
                init.out_gain / fan_in.sqrt()
            } else {
                init.gain * (2.0 / fan_in).sqrt()
            };
            let (w0, b0) = (net.weight_off[l], net.bias_off[l]);
            let nb = net.widths[l + 1];
            sample_into(&mut net.params[w0..b0], std, rng);
            sample_into(&mut net.params[b0..b0 + nb], init.bias_std, rng);
        }
        net
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn io_width(&self) -> usize {
        self.widths[0]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Stored dense-layer inputs per pixel.
    pub fn act_units(&self) -> usize {
        self.widths[..self.depth()].iter().sum()
    }

    /// ReLU units per pixel.
    pub fn hidden_units(&self) -> usize {
        self.widths[1..self.depth()].iter().sum()
    }

    /// Scratch length needed by the tangent and cotangent passes.
    pub fn buf_len(&self) -> usize {
        2 * self.widths.iter().copied().max().unwrap_or(0)
    }

    /// Multiply-adds for one pixel of one forward pass.
    pub fn flops_px(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn cast<U: Real>(&self) -> Subnet<U> {
        Subnet {
            widths: self.widths.clone(),
            weight_off: self.weight_off.clone(),
            bias_off: self.bias_off.clone(),
            act_off: self.act_off.clone(),
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    fn weights(&self, l: usize) -> &[T] {
        &self.params[self.weight_off[l]..self.bias_off[l]]
    }

    fn biases(&self, l: usize) -> &[T] {
        &self.params[self.bias_off[l]..self.bias_off[l] + self.widths[l + 1]]
    }

    /// Locates a flat parameter index: `(layer, Some((row, col)))` for weights and
    /// `(layer, None, row)` style for biases via the second element.
    fn locate(&self, index: usize) -> (usize, ParamSlot) {
        let l = match self.weight_off.binary_search(&index) {
            Ok(l) => l,
            Err(l) => l - 1,
        };
        let (w0, b0) = (self.weight_off[l], self.bias_off[l]);
        let inw = self.widths[l];
        if index < b0 {
            let k = index - w0;
            (l, ParamSlot::Weight(k / inw, k % inw))
        } else {
            (l, ParamSlot::Bias(index - b0))
        }
    }

    /// Evaluates the subnet on one pixel, recording dense-layer inputs and gates.
    pub fn forward_px(&self, x1: &[T], acts: &mut [T], gates: &mut [u8], out: &mut [T]) {
        let depth = self.depth();
        acts[..self.widths[0]].copy_from_slice(x1);
        let mut g = 0;
        for l in 0..depth {
            let (inw, outw) = (self.widths[l], self.widths[l + 1]);
            let w = self.weights(l);
            let b = self.biases(l);
            let a0 = self.act_off[l];
            if l + 1 < depth {
                let next = self.act_off[l + 1];
                let (inp, rest) = acts.split_at_mut(next);
                let inp = &inp[a0..a0 + inw];
                for r in 0..outw {
                    let z = b[r] + dot(&w[r * inw..(r + 1) * inw], inp);
                    let on = z > T::zero();
                    gates[g + r] = on as u8;
                    rest[r] = if on { z } else { T::zero() };
                }
                g += outw;
            } else {
                let inp = &acts[a0..a0 + inw];
                for r in 0..outw {
                    out[r] = b[r] + dot(&w[r * inw..(r + 1) * inw], inp);
                }
            }
        }
    }

    /// Forward tangent pass: `dout = dF/dx1 * du + dF/dtheta * dtheta`.
    ///
    /// `acts` is required when `dtheta` is not `None`.
    pub fn tangent_px(
        &self,
        acts: &[T],
        gates: &[u8],
        du: Option<&[T]>,
        dtheta: ParamTangent<'_, T>,
        buf: &mut [T],
        dout: &mut [T],
    ) {
        let depth = self.depth();
        let maxw = buf.len() / 2;
        let (mut cur, mut next) = buf.split_at_mut(maxw);
        let mut live = false;
        if let Some(du) = du {
            cur[..du.len()].copy_from_slice(du);
            live = true;
        }
        let basis = match dtheta {
            ParamTangent::Basis(i) => Some(self.locate(i)),
            _ => None,
        };
        let mut g = 0;
        for l in 0..depth {
            let (inw, outw) = (self.widths[l], self.widths[l + 1]);
            let w = self.weights(l);
            let nx = &mut next[..outw];
            if live {
                for r in 0..outw {
                    nx[r] = dot(&w[r * inw..(r + 1) * inw], &cur[..inw]);
                }
            } else {
                nx.fill(T::zero());
            }
            let a = &acts[self.act_off[l]..self.act_off[l] + inw];
            match dtheta {
                ParamTangent::None => {}
                ParamTangent::Dense(dt) => {
                    let dw = &dt[self.weight_off[l]..self.bias_off[l]];
                    let db = &dt[self.bias_off[l]..self.bias_off[l] + outw];
                    for r in 0..outw {
                        nx[r] += db[r] + dot(&dw[r * inw..(r + 1) * inw], a);
                    }
                    live = true;
                }
                ParamTangent::Basis(_) => match basis {
                    Some((bl, ParamSlot::Weight(r, c))) if bl == l => {
                        nx[r] += a[c];
                        live = true;
                    }
                    Some((bl, ParamSlot::Bias(r))) if bl == l => {
                        nx[r] += T::one();
                        live = true;
                    }
                    _ => {}
                },
            }
            if l + 1 < depth {
                for r in 0..outw {
                    if gates[g + r] == 0 {
                        nx[r] = T::zero();
                    }
                }
                g += outw;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let outw = self.widths[depth];
        if live {
            dout.copy_from_slice(&cur[..outw]);
        } else {
            dout.fill(T::zero());
        }
    }

    /// Reverse pass of cotangent `v` on the output.
    ///
    /// Accumulates the parameter gradient into `grad` (requires `acts`) and writes the
    /// input cotangent `v * dF/dx1` into `dx1`.
    pub fn reverse_px(
        &self,
        acts: Option<&[T]>,
        gates: &[u8],
        v: &[T],
        buf: &mut [T],
        mut grad: Option<&mut [T]>,
        dx1: Option<&mut [T]>,
    ) {
        let depth = self.depth();
        let maxw = buf.len() / 2;
        let (mut cur, mut next) = buf.split_at_mut(maxw);
        cur[..v.len()].copy_from_slice(v);
        let want_dx = dx1.is_some();
        for l in (0..depth).rev() {
            let (inw, outw) = (self.widths[l], self.widths[l + 1]);
            if let Some(gr) = grad.as_deref_mut() {
                let acts = acts.expect("parameter gradient needs dense-layer inputs");
                let a = &acts[self.act_off[l]..self.act_off[l] + inw];
                let (w0, b0) = (self.weight_off[l], self.bias_off[l]);
                for r in 0..outw {
                    let gz = cur[r];
                    if gz == T::zero() {
                        continue;
                    }
                    gr[b0 + r] += gz;
                    let row = &mut gr[w0 + r * inw..w0 + (r + 1) * inw];
                    for (gw, &ac) in row.iter_mut().zip(a) {
                        *gw += gz * ac;
                    }
                }
            }
            if l == 0 && !want_dx {
                return;
            }
            let w = self.weights(l);
            let nx = &mut next[..inw];
            nx.fill(T::zero());
            for r in 0..outw {
                let gz = cur[r];
                if gz == T::zero() {
                    continue;
                }
                for (o, &wv) in nx.iter_mut().zip(&w[r * inw..(r + 1) * inw]) {
                    *o += wv * gz;
                }
            }
            if l > 0 {
                let g0: usize = self.widths[1..l].iter().sum();
                for c in 0..inw {
                    if gates[g0 + c] == 0 {
                        nx[c] = T::zero();
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        if let Some(dx) = dx1 {
            dx.copy_from_slice(&cur[..self.widths[0]]);
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ParamSlot {
    Weight(usize, usize),
    Bias(usize),
}

/// Random initialisation scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    pub gain: f64,
    pub out_gain: f64,
    pub bias_std: f64,
    pub head_std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec { gain: 1.0, out_gain: 0.5, bias_std: 0.1, head_std: 0.5 }
    }
}

pub(crate) fn sample_into<T: Real>(out: &mut [T], std: f64, rng: &mut impl Rng) {
    if std == 0.0 {
        out.fill(T::zero());
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in out {
        *v = T::of(normal.sample(rng));
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
