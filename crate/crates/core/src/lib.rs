// SPDX-License-Identifier: MIT OR Apache-2.0

//! # lenslab
//!
//! Next-word surprisal from every layer of a decoder-only transformer,
//! read out with the logit lens or a tuned lens, and scored against human
//! reading measures by the gain in regression log-likelihood (ΔLL) that
//! current-word surprisal adds over a baseline of spillover surprisal,
//! word length and word frequency.

pub mod corpus;
pub mod error;
pub mod lens;
pub mod meta;
pub mod model;
pub mod ngram;
pub mod pipeline;
pub mod plot;
pub mod psychofit;
pub mod stats;
pub mod store;
pub mod synth;
pub mod tok;

pub use error::{Error, Result};
pub use lens::{LensKind, SurprisalTable, Translator, TranslatorSet};
pub use model::{make_toy_bundle, ModelBundle, ModelConfig, ResidualStream};
pub use tok::{align_words, Tokenizer, WordAlignment};

/// Load and validate a model bundle directory.
pub fn load_bundle(path: &std::path::Path) -> Result<ModelBundle> {
    ModelBundle::load(path)
}
