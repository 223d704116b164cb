//! Entropy-regularized stochastic-control fine-tuning of continuous-time
//! diffusion models, together with exact oracles for checking it.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod control;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod pretrained;
pub mod quad;
pub mod rewards;
pub mod sde;
pub mod value;

pub use error::{Error, Result};
