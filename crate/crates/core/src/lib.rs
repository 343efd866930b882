//! Learning from observations with an adversarially learned state-transition
//! reward and a distributional soft actor-critic policy optimizer.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure numerics:
//! the reverse-mode tape and networks in [`nn`], toy control environments in
//! [`env`], replay storage in [`data`], the learners ([`reward`], [`critic`],
//! [`qcritic`], [`actor`], [`risk`]), the training loop in [`trainer`], and the
//! empirical distance estimators in [`diagnostics`]. File formats, the CLI and
//! everything else that touches the OS live in the companion `module-cli` crate.
#![no_std]
#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod actor;
pub mod critic;
pub mod data;
pub mod diagnostics;
pub mod env;
mod error;
pub mod math;
pub mod nn;
pub mod qcritic;
pub mod reward;
pub mod risk;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
