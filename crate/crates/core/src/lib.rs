//! Gradient strategies for invertible networks with exact memory accounting.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod engines;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod ledger;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use engines::{compute, EngineOptions, GradReport, StrategyId};
pub use error::{Error, Result};
pub use ledger::{AllocTag, Ledger};
pub use network::{Network, NetworkSpec};
pub use scalar::{Precision, Real};
pub use tensor::{Mask, Tensor};
