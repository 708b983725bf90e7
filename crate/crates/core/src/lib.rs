//! Desk-scale post-training laboratory: Gibbs-initialized soft-target
//! fine-tuning, KL-regularized group policy optimization, and brute-force
//! Gibbs oracles over tiny autoregressive policies.

// Guards like `!(x >= 0.0)` reject NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod gift;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod rl;
pub mod tasks;

pub use error::{Error, Result};
pub use model::{Matrix, PolicyModel, TokenSequence, Vocabulary};
