//! Market regime detection toolkit.
//!
//! Hidden Markov models with Gaussian-mixture or gradient-boosted-tree
//! emissions, triple-barrier labels, a count-matrix feature score, and a
//! small LSTM head that maps stacked state posteriors to up/flat/down
//! probabilities. The [`pipeline`] module ties these together for the CLI.

// index loops read closer to the maths; negated comparisons also reject NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod boosted;
pub mod bundle;
pub mod commands;
pub mod data;
pub mod error;
pub mod features;
pub mod gmm;
pub mod hmm;
pub mod labeling;
pub mod lstm;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod trainers;

pub use error::{Error, Result};
