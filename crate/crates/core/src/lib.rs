//! Module-aware parameter-efficient unlearning for a gated toy transformer.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`tinyformer`]: the gated encoder classifier with exact gradients for
//!   parameters and module gates.
//! * [`fisher`]: empirical Fisher statistics over parameters and gates.
//! * [`maskselect`]: importance scores, warm start, greedy swap refinement
//!   and baseline selectors.
//! * [`unlearn`]: second-order and fine-tuning unlearners, masked or not.
//! * [`successive`]: streams of removal requests.
//! * [`evalattack`]: accuracy, membership inference, relearning attack.
//! * [`harness`]: synthetic data, experiment configs, runs and CSV export.

pub mod error;
pub mod evalattack;
pub mod fisher;
pub mod harness;
pub mod maskselect;
pub mod successive;
pub mod tinyformer;
pub mod unlearn;

pub use error::{Error, Result};
