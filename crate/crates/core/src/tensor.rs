//! Dense tensors whose storage is accounted for in a [`Ledger`].
//!
//! Shapes have rank 1 to 4. Image-like tensors are `[height, width, channels]` and
//! flat vectors may be written as `[1, 1, C]`. All operations allocate their result in
//! the ledger of the receiver; nothing aliases.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::ledger::{shape_bytes, AllocTag, Ledger, LedgerError, Lease};
use crate::scalar::Real;

pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    lease: Lease,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tag", &self.lease.tag())
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn zeros(ledger: &Ledger, shape: &[usize], tag: AllocTag) -> Result<Self> {
        check_shape(shape)?;
        let (len, bytes) = shape_bytes(shape, T::BYTES)?;
        // Register before touching the allocator so a failed size check leaves no trace.
        let lease = Lease::new(ledger, tag, bytes);
        Ok(Tensor { shape: shape.to_vec(), data: vec![T::zero(); len], lease })
    }

    pub fn from_vec(ledger: &Ledger, shape: &[usize], data: Vec<T>, tag: AllocTag) -> Result<Self> {
        check_shape(shape)?;
        let (len, bytes) = shape_bytes(shape, T::BYTES)?;
        if len != data.len() {
            return Err(Error::LengthMismatch { op: "from_vec", expected: len, actual: data.len() });
        }
        let lease = Lease::new(ledger, tag, bytes);
        Ok(Tensor { shape: shape.to_vec(), data, lease })
    }

    pub fn from_f64(ledger: &Ledger, shape: &[usize], data: &[f64], tag: AllocTag) -> Result<Self> {
        Self::from_vec(ledger, shape, data.iter().map(|&v| T::of(v)).collect(), tag)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn tag(&self) -> AllocTag {
        self.lease.tag()
    }

    pub fn ledger(&self) -> &Ledger {
        self.lease.ledger()
    }

    pub fn bytes(&self) -> u64 {
        self.data.len() as u64 * T::BYTES
    }

    pub fn retag(&mut self, tag: AllocTag) {
        self.lease.retag(tag);
    }

    pub fn with_tag(mut self, tag: AllocTag) -> Self {
        self.retag(tag);
        self
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Deregisters the tensor from its own ledger.
    pub fn free(self) -> Result<()> {
        let ledger = self.lease.ledger().clone();
        Ok(self.lease.release(&ledger)?)
    }

    /// A tracked deep copy with a new tag.
    pub fn copy(&self, tag: AllocTag) -> Result<Self> {
        Self::from_vec(self.ledger(), &self.shape, self.data.clone(), tag)
    }

    /// Zero tensor of the same shape in the same ledger.
    pub fn zeros_like(&self, tag: AllocTag) -> Result<Self> {
        Self::zeros(self.ledger(), &self.shape, tag)
    }

    /// Interprets a rank-3 tensor as `(height, width, channels)`.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected height x width x channels".into(),
            }),
        }
    }

    fn same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_vec(self.ledger(), &self.shape, data, self.tag())
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, "zip_map")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::from_vec(self.ledger(), &self.shape, data, self.tag())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.same_shape(other, "add")?;
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.same_shape(other, "sub")?;
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: T) -> Result<Self> {
        self.map(|v| v * alpha)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// `[m, k] x [k]` or `[m, k] x [k, n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Self> {
        let [m, k] = self.shape[..] else {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "matmul lhs must be rank 2".into(),
            });
        };
        let (k2, n, out_shape) = match rhs.shape[..] {
            [k2] => (k2, 1, vec![m]),
            [k2, n] => (k2, n, vec![m, n]),
            _ => {
                return Err(Error::InvalidShape {
                    shape: rhs.shape.clone(),
                    reason: "matmul rhs must be rank 1 or 2".into(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", expected: vec![k, n], actual: rhs.shape.clone() });
        }
        let mut out = Self::zeros(self.ledger(), &out_shape, self.tag())?;
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out.data[i * n + j] = row.iter().enumerate().map(|(p, &a)| a * rhs.data[p * n + j]).sum();
            }
        }
        Ok(out)
    }

    /// Appends zero channels to an `H x W x C` tensor.
    pub fn pad_channels(&self, channels: usize) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        if channels < c {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("cannot pad {c} channels down to {channels}"),
            });
        }
        let mut out = Self::zeros(self.ledger(), &[h, w, channels], self.tag())?;
        for p in 0..h * w {
            out.data[p * channels..p * channels + c].copy_from_slice(&self.data[p * c..(p + 1) * c]);
        }
        Ok(out)
    }

    /// Channels `range` of an `H x W x C` tensor.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        if range.start >= range.end || range.end > c {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("channel range {range:?} out of bounds"),
            });
        }
        let width = range.len();
        let mut out = Self::zeros(self.ledger(), &[h, w, width], self.tag())?;
        for p in 0..h * w {
            out.data[p * width..(p + 1) * width]
                .copy_from_slice(&self.data[p * c + range.start..p * c + range.end]);
        }
        Ok(out)
    }
}

impl Ledger {
    pub fn alloc<T: Real>(&self, shape: &[usize], tag: AllocTag) -> Result<Tensor<T>> {
        Tensor::zeros(self, shape, tag)
    }

    /// Frees a tensor that must belong to this ledger.
    pub fn free<T: Real>(&self, t: Tensor<T>) -> std::result::Result<(), LedgerError> {
        t.lease.release(self)
    }
}

/// One-byte-per-unit gate buffer (ReLU masks).
#[derive(Debug)]
pub struct Mask {
    data: Vec<u8>,
    lease: Lease,
}

impl Mask {
    pub fn zeros(ledger: &Ledger, len: usize, tag: AllocTag) -> Self {
        let lease = Lease::new(ledger, tag, len as u64);
        Mask { data: vec![0; len], lease }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tag(&self) -> AllocTag {
        self.lease.tag()
    }

    pub fn free(self) -> Result<()> {
        let ledger = self.lease.ledger().clone();
        Ok(self.lease.release(&ledger)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_charges_eight_bytes_per_element() {
        let l = Ledger::new();
        let t: Tensor<f64> = l.alloc(&[2, 2, 4], AllocTag::Activation).unwrap();
        assert_eq!(t.data(), &[0.0; 16]);
        assert_eq!(l.live_bytes(AllocTag::Activation), 128);
        let s: Tensor<f32> = l.alloc(&[2, 2, 4], AllocTag::Activation).unwrap();
        assert_eq!(l.live_bytes(AllocTag::Activation), 128 + 64);
        drop((t, s));
        assert_eq!(l.live_bytes(AllocTag::Activation), 0);
    }

    #[test]
    fn single_alloc_free_peak() {
        let l = Ledger::new();
        let t: Tensor<f64> = l.alloc(&[1, 1, 1], AllocTag::Workspace).unwrap();
        l.free(t).unwrap();
        assert!(l.peak_tracked_bytes() >= 8);
        assert_eq!(l.live_bytes(AllocTag::Workspace), 0);
    }

    #[test]
    fn sequential_versus_simultaneous_peak() {
        // 1 KiB = 128 f64 elements.
        let seq = Ledger::new();
        for _ in 0..2 {
            let t: Tensor<f64> = seq.alloc(&[128], AllocTag::Workspace).unwrap();
            seq.free(t).unwrap();
        }
        let sim = Ledger::new();
        let a: Tensor<f64> = sim.alloc(&[128], AllocTag::Workspace).unwrap();
        let b: Tensor<f64> = sim.alloc(&[128], AllocTag::Workspace).unwrap();
        sim.free(a).unwrap();
        sim.free(b).unwrap();
        assert_eq!(seq.peak_tracked_bytes(), 1024);
        assert_eq!(sim.peak_tracked_bytes(), 2048);
    }

    #[test]
    fn freeing_into_wrong_ledger_fails() {
        let a = Ledger::new();
        let b = Ledger::new();
        let t: Tensor<f64> = a.alloc(&[4], AllocTag::Workspace).unwrap();
        assert_eq!(b.free(t), Err(LedgerError::ForeignLedger));
        // The rejected tensor is still released from its own ledger when dropped.
        assert_eq!(a.live_bytes(AllocTag::Workspace), 0);
    }

    #[test]
    fn zero_extent_is_rejected() {
        let l = Ledger::new();
        assert!(l.alloc::<f64>(&[2, 0, 1], AllocTag::Workspace).is_err());
        assert!(l.alloc::<f64>(&[usize::MAX, 3], AllocTag::Workspace).is_err());
        assert_eq!(l.tracked_live_bytes(), 0);
    }

    #[test]
    fn pad_channels_appends_zeros() {
        let l = Ledger::new();
        let data: Vec<f64> = (1..=12).map(f64::from).collect();
        let t = Tensor::from_vec(&l, &[2, 2, 3], data, AllocTag::Activation).unwrap();
        let p = t.pad_channels(8).unwrap();
        assert_eq!(p.shape(), &[2, 2, 8]);
        for px in 0..4 {
            let chunk = &p.data()[px * 8..(px + 1) * 8];
            assert_eq!(&chunk[..3], &t.data()[px * 3..px * 3 + 3]);
            assert!(chunk[3..].iter().all(|&v| v == 0.0));
        }
        let back = p.slice_channels(0..3).unwrap();
        assert_eq!(back.data(), t.data());
        assert!(t.pad_channels(2).is_err());
    }

    #[test]
    fn identity_matmul_and_inverse_elements() {
        let l = Ledger::new();
        let eye = Tensor::from_vec(&l, &[2, 2], vec![1.0, 0.0, 0.0, 1.0], AllocTag::Workspace).unwrap();
        let v = Tensor::from_vec(&l, &[2], vec![3.5, -2.0], AllocTag::Workspace).unwrap();
        assert_eq!(eye.matmul(&v).unwrap().data(), v.data());
        let z = v.add(&v.scale(-1.0).unwrap()).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        let bad = Tensor::from_vec(&l, &[3], vec![0.0; 3], AllocTag::Workspace).unwrap();
        assert!(matches!(v.add(&bad), Err(Error::ShapeMismatch { .. })));
        assert!(eye.matmul(&bad).is_err());
    }

    #[test]
    fn mask_charges_one_byte_per_unit() {
        let l = Ledger::new();
        let m = Mask::zeros(&l, 100, AllocTag::ResidualX);
        assert_eq!(l.live_bytes(AllocTag::ResidualX), 100);
        m.free().unwrap();
        assert_eq!(l.live_bytes(AllocTag::ResidualX), 0);
    }
}
