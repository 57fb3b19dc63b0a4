//! Invertible space-to-channel rearrangement with factor 2.
//!
//! Input pixel `(i, j)` channel `c` lands at output pixel `(i / 2, j / 2)` channel
//! `((i % 2) * 2 + j % 2) * C + c`, so a 2x2 patch is read in row-major order.

use crate::error::{Error, Result};
use crate::ledger::AllocTag;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DownsampleLayer;

impl DownsampleLayer {
    pub fn out_shape(&self, (h, w, c): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: vec![h, w, c],
                reason: "downsampling needs even height and width".into(),
            });
        }
        Ok((h / 2, w / 2, 4 * c))
    }

    /// Index of input element `(i, j, c)` in the output buffer.
    fn target(i: usize, j: usize, c: usize, w: usize, ch: usize) -> usize {
        let (oi, oj) = (i / 2, j / 2);
        let oc = ((i % 2) * 2 + j % 2) * ch + c;
        (oi * (w / 2) + oj) * 4 * ch + oc
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>, tag: AllocTag) -> Result<Tensor<T>> {
        let (h, w, c) = x.hwc()?;
        let (oh, ow, oc) = self.out_shape((h, w, c))?;
        let mut out = vec![T::zero(); x.len()];
        let xd = x.data();
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out[Self::target(i, j, k, w, c)] = xd[(i * w + j) * c + k];
                }
            }
        }
        Tensor::from_vec(x.ledger(), &[oh, ow, oc], out, tag)
    }

    pub fn inverse<T: Real>(&self, y: &Tensor<T>, tag: AllocTag) -> Result<Tensor<T>> {
        let (oh, ow, oc) = y.hwc()?;
        if oc % 4 != 0 {
            return Err(Error::InvalidShape {
                shape: y.shape().to_vec(),
                reason: "channel count must be a multiple of 4 to undo downsampling".into(),
            });
        }
        let (h, w, c) = (oh * 2, ow * 2, oc / 4);
        let mut out = vec![T::zero(); y.len()];
        let yd = y.data();
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out[(i * w + j) * c + k] = yd[Self::target(i, j, k, w, c)];
                }
            }
        }
        Tensor::from_vec(y.ledger(), &[h, w, c], out, tag)
    }
}
