//! Math word problem generation toolkit: a small autoregressive generator
//! conditioned on equations and keywords, trained with an equation
//! consistency objective and a learned keyword selector, plus the evaluation
//! stack (BLEU/ROUGE/METEOR, distinct-n, equation accuracy, novelty) needed
//! to measure it. Everything is deterministic given a seed and runs on CPU.
//!
//! Start with the `examples/` directory; each file exercises one capability
//! end to end.

pub mod cli;
pub mod corpus;
pub mod diagnostics;
pub mod discrete;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selector;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
