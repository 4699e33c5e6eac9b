//! Gated delta-rule family of linear-recurrent attention state updates.
//!
//! The crate covers the whole update-rule taxonomy from plain linear
//! attention up to channel-wise learning rates (`fg2gdn`, `fg2gdn_plus`):
//!
//! - [`numerics`]: dense vectors/matrices, rank-1 primitives and a
//!   counter-based RNG.
//! - [`rules`]: the rule registry and single-step transitions.
//! - [`scan`]: the sequential reference engine.
//! - [`chunkwise`]: the WY/UT chunkwise-parallel forward kernel.
//! - [`grad`]: reverse-mode gradients through the scan plus a
//!   finite-difference verifier.
//! - [`model`]: a toy hybrid language model built on the above.
//! - [`train`]: associative-recall data, schedule, AdamW and metrics.
//!
//! The crate is `no_std` and only needs `alloc`. IO, timing and the CLI live
//! in the `deltakit` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod chunkwise;
mod error;
pub mod grad;
pub(crate) mod math;
pub mod model;
pub mod numerics;
pub mod reference;
pub mod rules;
pub mod scan;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng, Vector};
pub use rules::{Gate, RuleKind, StepGates, StepInput};
pub use scan::{SequenceInputs, SequenceOutputs};
