//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "IGRADCK\0"
//! version  u32
//! config   u64 length + UTF-8 bytes (free-form echo of the producing config)
//! groups   u32 count, then one u64 length per group
//! values   f64 per parameter, groups in order
//! ```
//!
//! Groups are the trunk layers in order followed by the head. Values are stored as
//! `f64`, so both precisions round-trip bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"IGRADCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub groups: Vec<Vec<f64>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length does not fit in memory".into()))
    }
}

impl Checkpoint {
    pub fn from_network<T: Real>(net: &Network<T>, config: impl Into<String>) -> Self {
        let mut groups: Vec<Vec<f64>> =
            net.layers().iter().map(|l| l.params().iter().map(|v| v.as_f64()).collect()).collect();
        groups.push(net.head().params().iter().map(|v| v.as_f64()).collect());
        Checkpoint { config: config.into(), groups }
    }

    /// Overwrites the parameters of `net`; group sizes must match exactly.
    pub fn apply_to<T: Real>(&self, net: &mut Network<T>) -> Result<()> {
        let n = net.layers().len();
        if self.groups.len() != n + 1 {
            return Err(Error::Checkpoint(format!("expected {} groups, found {}", n + 1, self.groups.len())));
        }
        for (i, g) in self.groups.iter().enumerate() {
            let dst = if i < n { net.layers_mut()[i].params_mut() } else { net.head_mut().params_mut() };
            if dst.len() != g.len() {
                return Err(Error::Checkpoint(format!("group {i} has {} values, network expects {}", g.len(), dst.len())));
            }
            for (d, &v) in dst.iter_mut().zip(g) {
                *d = T::of(v);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            out.extend_from_slice(&(g.len() as u64).to_le_bytes());
        }
        for v in self.groups.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let clen = r.len()?;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let ngroups = r.u32()? as usize;
        let sizes = (0..ngroups).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let mut groups = Vec::with_capacity(ngroups);
        for n in sizes {
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("group too large".into()))?)?;
            groups.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { config, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
