//! Time-sharing resource allocation for interference channels.
//!
//! Users are switched on by independent coin flips whose biases come from a
//! per-user pressure vector; any unconstrained power-control policy then runs
//! among the active users. The pressure is driven by the gap between each
//! user's demand and its realized utility, so demands are met on average
//! without retraining the policy.

// `!(x >= 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alcor;
pub mod channel;
pub mod constraints;
pub mod distributed;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod metrics;
pub mod rng;
pub mod traffic;
pub mod ura;
pub mod utility;

pub use error::{Error, Result};
