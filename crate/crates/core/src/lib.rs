//! Multimodal attention kernels: additive attention, dense high-order
//! cross-modal attention over correlation tensors, its low-rank
//! factorisation, attentive fusion, and a toy captioner built on a small
//! reverse-mode differentiation engine.

pub mod autodiff;
pub mod bahdanau;
pub mod bench;
pub mod binio;
pub mod captioner;
pub mod error;
pub mod hoca;
pub mod lowrank;
pub mod maf;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{HocaError, Result};
