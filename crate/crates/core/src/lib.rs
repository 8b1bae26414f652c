//! Routing-gradient estimation for sparse mixture-of-experts layers.
//!
//! The crate bundles a small reverse-mode differentiation tape, a top-1
//! router with jitter masking, a family of router-gradient estimators
//! (neglect, REINFORCE, straight-through, Gumbel straight-through and the
//! SparseMixer first-order, mid-point and combined variants), a trainable MoE
//! layer, an exact enumeration oracle, and the experiment harness behind the
//! `moegradlab` binary.

pub mod autodiff;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod moe;
pub mod oracle;
pub mod routing;

pub use error::{Error, Result};
