//! Parameter-cycling transformer laboratory.
//!
//! Head-tail decoupled cycling, zero-token attention, gated FFNs and
//! zero-attention early exit, with a small reverse-mode autodiff engine to
//! train them on byte-level corpora.

pub mod adaptive;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod train_eval;

pub use error::{Error, Result};
