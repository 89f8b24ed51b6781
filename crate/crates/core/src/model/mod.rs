//! Component-segmented LSTM encoder-decoder with dot-product attention.

mod component;
mod config;
mod seq2seq;
mod store;

pub use component::Component;
pub use config::{DecoderInit, ModelConfig};
pub use seq2seq::{build_model, Batch, DecoderState, Dropout, Encoded, Seq2Seq, BOS_ID, EOS_ID, UNK_ID};
pub use store::ParameterStore;
pub use crate::nn::PAD_ID;
