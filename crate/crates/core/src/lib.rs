//! Attentional encoder-decoder translation with factored source input.
//!
//! The source side of every sentence is a sequence of [`FactoredToken`]s:
//! a surface (sub)word plus an arbitrary number of annotation factors
//! (lemma, subword tag, POS, dependency label, morphology). Each factor has
//! its own embedding matrix; the per-factor embeddings are concatenated into
//! one vector of fixed total width before entering the bidirectional GRU
//! encoder, so the rest of the network is independent of the feature split.
//!
//! Pipeline modules:
//!
//! - [`textio`]: factored corpus format, vocabularies, numberization.
//! - [`bpe`]: joint byte-pair-encoding learning and segmentation.
//! - [`featalign`]: subword tags and word-to-subword feature propagation.
//! - [`numerics`]: dense tensors, a define-by-run tape with reverse-mode
//!   gradients, and a finite-difference checker.
//! - [`model`]: the factored encoder-decoder and checkpoints.
//! - [`training`]: Adadelta, clipping, dropout, the training loop, ensembles.
//! - [`decoding`]: beam search.
//! - [`metrics`]: perplexity, BLEU, chrF3, paired bootstrap.
//! - [`cli`]: the `factored-nmt` command line.

pub mod bpe;
pub mod cli;
pub mod decoding;
mod error;
pub mod featalign;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod textio;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use textio::{FactoredToken, FeatureScheme, Vocabulary};
