//! Toolkit for information-elicitation dialogues.
//!
//! The crate covers the full offline pipeline: ingesting dialogue corpora,
//! cutting them into fixed-length training blocks, annotating entity-novelty
//! rewards and returns-to-go, computing the elicitation metrics (conformity,
//! progression, turn-length ratio) and training elicitor policies with
//! advantage-weighted regression or its supervised reduction.
//!
//! Everything model-dependent sits behind the traits in [`providers`]. The
//! reference providers are deterministic and light enough to run the whole
//! test suite on a laptop.
//!
//! Per-dialogue and per-block loops run on rayon when the `parallel` feature
//! is enabled (the default). See [`exec`].

// `!(x > y)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod exec;
pub mod lm;
pub mod metrics;
pub mod providers;
pub mod reward;
pub mod segmentation;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};

/// Prompt used for prompted-baseline evaluation runs.
pub const BASELINE_PROMPT: &str = include_str!("../assets/baseline_prompt.txt");
