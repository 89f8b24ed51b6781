//! Freezing-subnetworks laboratory for continued training of neural
//! translation models.
//!
//! An out-of-domain LSTM encoder-decoder is trained on a synthetic corpus,
//! adapted to a second domain while whole components (source embeddings,
//! encoder, decoder, softmax, target embeddings) are frozen, and then
//! measured: per-component RMS parameter movement and BLEU sensitivity to
//! Gaussian noise.
//!
//! Runnable walkthroughs live in `examples/`; the `freezelab` binary exposes
//! the same pipeline as subcommands.

pub mod analysis;
pub mod bpe;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Component, ModelConfig, ParameterStore};
