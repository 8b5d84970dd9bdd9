//! Learning dynamically optimal treatment-assignment policies.
//!
//! Offline observational data is turned into doubly-robust rewards, an
//! arrival model and a simulated budget environment; a logistic policy is
//! then trained with actor-critic updates and checked against exact
//! dynamic-programming solutions on small instances.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor_critic;
pub mod arrivals;
pub mod data;
pub mod dp;
pub mod env;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod online;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod synth;
pub mod value;

pub use error::{Error, Result};
