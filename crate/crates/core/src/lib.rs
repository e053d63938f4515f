//! Semi-supervised learning with negative labels.
//!
//! The crate bundles a small reverse-mode differentiation core, an MLP
//! classifier, the negative-sampling loss together with the usual
//! companions (VAT, Π-model, entropy minimization, pseudo-labeling,
//! MixMatch), negative-label selection strategies, synthetic data and a
//! deterministic training loop.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod mixmatch;
pub mod model;
pub mod negselect;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
