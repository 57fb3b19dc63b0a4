//! Allocation ledger.
//!
//! Every tensor and residual buffer created by a gradient strategy holds a lease on a
//! [`Ledger`]. The ledger keeps per-tag live byte counts and the peak of the *tracked*
//! total, which excludes parameters and gradients. Counting is purely event driven, so
//! identical operation sequences always produce identical peaks.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

/// What a buffer is for. Determines whether it counts towards the tracked peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AllocTag {
    Activation,
    /// Information needed to linearize a layer with respect to its input.
    ResidualX,
    /// Additional information needed to linearize a layer with respect to its parameters.
    ResidualTheta,
    Parameter,
    Gradient,
    Tangent,
    Cotangent,
    Workspace,
}

impl AllocTag {
    pub const ALL: [AllocTag; 8] = [
        AllocTag::Activation,
        AllocTag::ResidualX,
        AllocTag::ResidualTheta,
        AllocTag::Parameter,
        AllocTag::Gradient,
        AllocTag::Tangent,
        AllocTag::Cotangent,
        AllocTag::Workspace,
    ];

    fn index(self) -> usize {
        self as usize
    }

    /// Parameters and gradients are outputs/inputs of the computation, not the cost of it.
    pub fn is_tracked(self) -> bool {
        !matches!(self, AllocTag::Parameter | AllocTag::Gradient)
    }

    pub fn name(self) -> &'static str {
        match self {
            AllocTag::Activation => "activation",
            AllocTag::ResidualX => "residual_x",
            AllocTag::ResidualTheta => "residual_theta",
            AllocTag::Parameter => "parameter",
            AllocTag::Gradient => "gradient",
            AllocTag::Tangent => "tangent",
            AllocTag::Cotangent => "cotangent",
            AllocTag::Workspace => "workspace",
        }
    }
}

impl fmt::Display for AllocTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AllocId(u64);

impl AllocId {
    pub fn raw(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerEvent {
    Alloc { id: AllocId, tag: AllocTag, bytes: u64 },
    Free { id: AllocId, tag: AllocTag, bytes: u64 },
    Retag { id: AllocId, from: AllocTag, to: AllocTag, bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("double free of allocation {0:?}")]
    DoubleFree(AllocId),
    #[error("allocation {0:?} is not registered in this ledger")]
    Unregistered(AllocId),
    #[error("tensor belongs to a different ledger")]
    ForeignLedger,
    #[error("size of shape {0:?} overflows")]
    SizeOverflow(Vec<usize>),
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
struct Peaks {
    tracked: u64,
    bytes: [u64; 8],
    count: [usize; 8],
}

impl Peaks {
    fn raise(&mut self, tracked: u64, live: &[u64; 8], count: &[usize; 8]) {
        self.tracked = self.tracked.max(tracked);
        for i in 0..8 {
            self.bytes[i] = self.bytes[i].max(live[i]);
            self.count[i] = self.count[i].max(count[i]);
        }
    }

    fn at(tracked: u64, live: &[u64; 8], count: &[usize; 8]) -> Self {
        Peaks { tracked, bytes: *live, count: *count }
    }
}

#[derive(Debug)]
struct State {
    live: [u64; 8],
    count: [usize; 8],
    tracked: u64,
    peaks: Peaks,
    window: Peaks,
    next_id: u64,
    leases: HashMap<u64, (AllocTag, u64)>,
    events: Option<Vec<LedgerEvent>>,
}

impl State {
    fn apply(&mut self, tag: AllocTag, bytes: u64, add: bool) {
        let i = tag.index();
        if add {
            self.live[i] += bytes;
            self.count[i] += 1;
            if tag.is_tracked() {
                self.tracked += bytes;
            }
            self.peaks.raise(self.tracked, &self.live, &self.count);
            self.window.raise(self.tracked, &self.live, &self.count);
        } else {
            self.live[i] -= bytes;
            self.count[i] -= 1;
            if tag.is_tracked() {
                self.tracked -= bytes;
            }
        }
    }
}

/// Shared handle to a per-run allocation ledger.
///
/// Cloning the handle does not clone the ledger. Ledgers are single-threaded; parallel
/// runs use disjoint ledgers.
#[derive(Clone)]
pub struct Ledger {
    inner: Rc<RefCell<State>>,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.inner.borrow();
        f.debug_struct("Ledger")
            .field("live", &s.live)
            .field("tracked", &s.tracked)
            .field("peak_tracked", &s.peaks.tracked)
            .finish()
    }
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Ledger {
            inner: Rc::new(RefCell::new(State {
                live: [0; 8],
                count: [0; 8],
                tracked: 0,
                peaks: Peaks::default(),
                window: Peaks::default(),
                next_id: 0,
                leases: HashMap::new(),
                events: None,
            })),
        }
    }

    /// A ledger that additionally records every transition.
    pub fn with_event_log() -> Self {
        let ledger = Self::new();
        ledger.inner.borrow_mut().events = Some(Vec::new());
        ledger
    }

    pub fn same_as(&self, other: &Ledger) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn register(&self, tag: AllocTag, bytes: u64) -> AllocId {
        let mut s = self.inner.borrow_mut();
        let id = AllocId(s.next_id);
        s.next_id += 1;
        s.leases.insert(id.0, (tag, bytes));
        s.apply(tag, bytes, true);
        if let Some(ev) = s.events.as_mut() {
            ev.push(LedgerEvent::Alloc { id, tag, bytes });
        }
        id
    }

    pub fn release(&self, id: AllocId) -> Result<(), LedgerError> {
        let mut s = self.inner.borrow_mut();
        let Some((tag, bytes)) = s.leases.remove(&id.0) else {
            return Err(if id.0 < s.next_id {
                LedgerError::DoubleFree(id)
            } else {
                LedgerError::Unregistered(id)
            });
        };
        s.apply(tag, bytes, false);
        if let Some(ev) = s.events.as_mut() {
            ev.push(LedgerEvent::Free { id, tag, bytes });
        }
        Ok(())
    }

    pub fn retag(&self, id: AllocId, to: AllocTag) -> Result<(), LedgerError> {
        let mut s = self.inner.borrow_mut();
        let Some(&(from, bytes)) = s.leases.get(&id.0) else {
            return Err(if id.0 < s.next_id {
                LedgerError::DoubleFree(id)
            } else {
                LedgerError::Unregistered(id)
            });
        };
        if from == to {
            return Ok(());
        }
        s.apply(from, bytes, false);
        s.apply(to, bytes, true);
        s.leases.insert(id.0, (to, bytes));
        if let Some(ev) = s.events.as_mut() {
            ev.push(LedgerEvent::Retag { id, from, to, bytes });
        }
        Ok(())
    }

    pub fn live_bytes(&self, tag: AllocTag) -> u64 {
        self.inner.borrow().live[tag.index()]
    }

    pub fn live_count(&self, tag: AllocTag) -> usize {
        self.inner.borrow().count[tag.index()]
    }

    /// Live bytes summed over tracked tags.
    pub fn tracked_live_bytes(&self) -> u64 {
        self.inner.borrow().tracked
    }

    pub fn peak_tracked_bytes(&self) -> u64 {
        self.inner.borrow().peaks.tracked
    }

    pub fn peak_bytes(&self, tag: AllocTag) -> u64 {
        self.inner.borrow().peaks.bytes[tag.index()]
    }

    pub fn peak_count(&self, tag: AllocTag) -> usize {
        self.inner.borrow().peaks.count[tag.index()]
    }

    /// Resets all peaks (including the window) to the current live state.
    pub fn reset_peaks(&self) {
        let mut s = self.inner.borrow_mut();
        let p = Peaks::at(s.tracked, &s.live, &s.count);
        s.peaks = p;
        s.window = p;
    }

    /// Starts a measurement window without touching the run-level peaks.
    pub fn begin_window(&self) {
        let mut s = self.inner.borrow_mut();
        s.window = Peaks::at(s.tracked, &s.live, &s.count);
    }

    pub fn window_peak_tracked_bytes(&self) -> u64 {
        self.inner.borrow().window.tracked
    }

    pub fn window_peak_bytes(&self, tag: AllocTag) -> u64 {
        self.inner.borrow().window.bytes[tag.index()]
    }

    pub fn window_peak_count(&self, tag: AllocTag) -> usize {
        self.inner.borrow().window.count[tag.index()]
    }

    /// Recorded transitions, empty unless created with [`Ledger::with_event_log`].
    pub fn events(&self) -> Vec<LedgerEvent> {
        self.inner.borrow().events.clone().unwrap_or_default()
    }
}

/// Registration held by a buffer. Released on drop unless already released.
#[derive(Debug)]
pub(crate) struct Lease {
    ledger: Ledger,
    id: AllocId,
    tag: AllocTag,
    released: bool,
}

impl Lease {
    pub(crate) fn new(ledger: &Ledger, tag: AllocTag, bytes: u64) -> Self {
        let id = ledger.register(tag, bytes);
        Lease { ledger: ledger.clone(), id, tag, released: false }
    }

    pub(crate) fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub(crate) fn tag(&self) -> AllocTag {
        self.tag
    }

    pub(crate) fn retag(&mut self, tag: AllocTag) {
        // The lease is live while `self` exists, so this cannot fail.
        self.ledger.retag(self.id, tag).expect("live lease");
        self.tag = tag;
    }

    pub(crate) fn release(mut self, ledger: &Ledger) -> Result<(), LedgerError> {
        if !self.ledger.same_as(ledger) {
            return Err(LedgerError::ForeignLedger);
        }
        self.released = true;
        self.ledger.release(self.id)
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        if !self.released {
            let _ = self.ledger.release(self.id);
        }
    }
}

/// Byte count of `shape` at `elem_bytes` per element, with overflow detection.
pub(crate) fn shape_bytes(shape: &[usize], elem_bytes: u64) -> Result<(usize, u64), LedgerError> {
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| LedgerError::SizeOverflow(shape.to_vec()))?;
    let bytes = (len as u64)
        .checked_mul(elem_bytes)
        .ok_or_else(|| LedgerError::SizeOverflow(shape.to_vec()))?;
    Ok((len, bytes))
}
