//! Preference-optimization lab.
//!
//! Closed-form DPO-family objectives with analytic gradients, a tabular
//! autoregressive policy, a synthetic self-instruct data pipeline and an
//! iterative trainer, plus the diagnostics used to study them.

pub mod analysis;
pub mod error;
pub mod objectives;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
