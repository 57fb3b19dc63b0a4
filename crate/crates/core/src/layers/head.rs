//! Loss head: spatial mean pool, dense map to class logits, softmax cross-entropy.
//!
//! The head sits after the last invertible layer and is differentiated directly. The
//! quantities shared by every derivative are the pooled features and the residual
//! `delta = softmax(logits) - onehot(label)`, collected in [`HeadCache`].

use rand::Rng;

use super::subnet::{dot, sample_into, ParamTangent};
use crate::error::{Error, Result};
use crate::ledger::AllocTag;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    features: usize,
    classes: usize,
    /// Weights (`classes x features`, row-major) then biases.
    params: Vec<T>,
}

/// Forward values of the head for one input and label.
#[derive(Debug)]
pub struct HeadCache<T: Real> {
    pub loss: T,
    pub pooled: Tensor<T>,
    pub delta: Tensor<T>,
    pixels: usize,
}

impl<T: Real> HeadCache<T> {
    pub fn free(self) -> Result<()> {
        self.pooled.free()?;
        self.delta.free()
    }
}

/// `log(sum(exp(z)))` without overflow.
pub fn log_sum_exp<T: Real>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    if m.is_infinite() {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| (v - lse).exp()).collect()
}

impl<T: Real> Head<T> {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Head { features, classes, params: vec![T::zero(); classes * (features + 1)] }
    }

    pub fn random(features: usize, classes: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut h = Self::zeros(features, classes);
        sample_into(&mut h.params[..classes * features], std / (features as f64).sqrt(), rng);
        h
    }

    pub fn from_params(features: usize, classes: usize, params: Vec<T>) -> Result<Self> {
        let want = classes * (features + 1);
        if params.len() != want {
            return Err(Error::LengthMismatch { op: "head params", expected: want, actual: params.len() });
        }
        Ok(Head { features, classes, params })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
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

    pub fn cast<U: Real>(&self) -> Head<U> {
        Head {
            features: self.features,
            classes: self.classes,
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    fn weight_row(&self, r: usize) -> &[T] {
        &self.params[r * self.features..(r + 1) * self.features]
    }

    fn bias(&self, r: usize) -> T {
        self.params[self.classes * self.features + r]
    }

    fn check(&self, x: &Tensor<T>, label: usize) -> Result<usize> {
        let (h, w, c) = x.hwc()?;
        if c != self.features {
            return Err(Error::ShapeMismatch { op: "head", expected: vec![h, w, self.features], actual: x.shape().to_vec() });
        }
        if label >= self.classes {
            return Err(Error::Label { label, classes: self.classes });
        }
        Ok(h * w)
    }

    fn pool(&self, x: &[T], pixels: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.features];
        for px in x.chunks_exact(self.features) {
            for (o, &v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(pixels as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    pub fn logits(&self, pooled: &[T]) -> Vec<T> {
        (0..self.classes).map(|r| self.bias(r) + dot(self.weight_row(r), pooled)).collect()
    }

    pub fn cache(&self, x: &Tensor<T>, label: usize) -> Result<HeadCache<T>> {
        let pixels = self.check(x, label)?;
        let pooled = self.pool(x.data(), pixels);
        let z = self.logits(&pooled);
        let lse = log_sum_exp(&z);
        let loss = lse - z[label];
        let mut delta: Vec<T> = z.iter().map(|&v| (v - lse).exp()).collect();
        delta[label] -= T::one();
        let ledger = x.ledger();
        Ok(HeadCache {
            loss,
            pooled: Tensor::from_vec(ledger, &[self.features], pooled, AllocTag::Workspace)?,
            delta: Tensor::from_vec(ledger, &[self.classes], delta, AllocTag::Workspace)?,
            pixels,
        })
    }

    pub fn loss(&self, x: &Tensor<T>, label: usize) -> Result<T> {
        let c = self.cache(x, label)?;
        let loss = c.loss;
        c.free()?;
        Ok(loss)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        let pooled = self.pool(x.data(), self.check(x, 0)?);
        let z = self.logits(&pooled);
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// `dJ/dx`, shaped like `x`.
    pub fn input_grad(&self, cache: &HeadCache<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut back = vec![T::zero(); self.features];
        for (r, &d) in cache.delta.data().iter().enumerate() {
            for (b, &w) in back.iter_mut().zip(self.weight_row(r)) {
                *b += d * w;
            }
        }
        let inv = T::one() / T::of(cache.pixels as f64);
        back.iter_mut().for_each(|v| *v *= inv);
        let mut g = x.zeros_like(AllocTag::Cotangent)?;
        for px in g.data_mut().chunks_exact_mut(self.features) {
            px.copy_from_slice(&back);
        }
        Ok(g)
    }

    pub fn param_grad(&self, cache: &HeadCache<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Tensor::zeros(x.ledger(), &[self.n_params()], AllocTag::Gradient)?;
        let gd = g.data_mut();
        let (delta, pooled) = (cache.delta.data(), cache.pooled.data());
        for (r, &d) in delta.iter().enumerate() {
            for (gw, &p) in gd[r * self.features..(r + 1) * self.features].iter_mut().zip(pooled) {
                *gw = d * p;
            }
            gd[self.classes * self.features + r] = d;
        }
        Ok(g)
    }

    /// Directional derivative of the loss along an input tangent `u`.
    pub fn jvp_input(&self, cache: &HeadCache<T>, u: &Tensor<T>) -> Result<T> {
        if u.len() != cache.pixels * self.features {
            return Err(Error::LengthMismatch { op: "head jvp_input", expected: cache.pixels * self.features, actual: u.len() });
        }
        let du = self.pool(u.data(), cache.pixels);
        Ok(cache.delta.data().iter().enumerate().map(|(r, &d)| d * dot(self.weight_row(r), &du)).sum())
    }

    /// Directional derivative of the loss along a parameter tangent.
    pub fn jvp_params(&self, cache: &HeadCache<T>, dtheta: ParamTangent<'_, T>) -> Result<T> {
        let (delta, pooled) = (cache.delta.data(), cache.pooled.data());
        let wn = self.classes * self.features;
        Ok(match dtheta {
            ParamTangent::None => T::zero(),
            ParamTangent::Basis(i) if i < wn => delta[i / self.features] * pooled[i % self.features],
            ParamTangent::Basis(i) if i < self.n_params() => delta[i - wn],
            ParamTangent::Basis(i) => {
                return Err(Error::LengthMismatch { op: "head basis", expected: self.n_params(), actual: i + 1 })
            }
            ParamTangent::Dense(dt) => {
                if dt.len() != self.n_params() {
                    return Err(Error::LengthMismatch { op: "head jvp_params", expected: self.n_params(), actual: dt.len() });
                }
                (0..self.classes)
                    .map(|r| delta[r] * (dt[wn + r] + dot(&dt[r * self.features..(r + 1) * self.features], pooled)))
                    .sum()
            }
        })
    }
}
