//! Split federated LoRA fine-tuning over noisy wireless uplinks, where the
//! channel noise itself provides local differential privacy.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod privacy;

pub use error::{Error, Result};
