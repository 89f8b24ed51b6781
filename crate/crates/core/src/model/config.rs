use std::fmt::Write as _;

use crate::error::{Error, Result};

/// How the decoder's recurrent state is initialised for each sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderInit {
    /// All-zero hidden and cell states.
    Zeros,
    /// `tanh(W * last_encoder_state + b)` per decoder layer, for both `h` and `c`.
    /// These layers are tagged Decoder.
    EncoderLast,
}

impl DecoderInit {
    pub fn name(self) -> &'static str {
        match self {
            DecoderInit::Zeros => "zeros",
            DecoderInit::EncoderLast => "encoder-last",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(DecoderInit::Zeros),
            "encoder-last" => Ok(DecoderInit::EncoderLast),
            _ => Err(Error::Format(format!("unknown decoder init {s:?}"))),
        }
    }
}

/// Architecture settings. Dropout and label smoothing belong to the training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    /// Total encoder output width; the bidirectional first layer uses half per direction.
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub decoder_init: DecoderInit,
    /// Half-width of the uniform initialisation interval.
    pub init_scale: f64,
}

impl ModelConfig {
    /// Small model used for the synthetic experiments.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            embed_dim: 32,
            hidden_dim: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            decoder_init: DecoderInit::Zeros,
            init_scale: 0.1,
        }
    }

    /// 512-dimensional model with encoder-last decoder initialisation.
    pub fn paper(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            embed_dim: 512,
            hidden_dim: 512,
            decoder_init: DecoderInit::EncoderLast,
            ..ModelConfig::desk(src_vocab, tgt_vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.src_vocab <= 4 || self.tgt_vocab <= 4 {
            return bad("vocabularies must exceed the 4 reserved tokens".into());
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return bad(format!("hidden_dim {} must be even", self.hidden_dim));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init scale {}", self.init_scale));
        }
        Ok(())
    }

    /// Canonical `key=value` lines, stable across runs.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.src_vocab={}", self.src_vocab);
        let _ = writeln!(s, "model.tgt_vocab={}", self.tgt_vocab);
        let _ = writeln!(s, "model.embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "model.hidden_dim={}", self.hidden_dim);
        let _ = writeln!(s, "model.encoder_layers={}", self.encoder_layers);
        let _ = writeln!(s, "model.decoder_layers={}", self.decoder_layers);
        let _ = writeln!(s, "model.decoder_init={}", self.decoder_init.name());
        let _ = writeln!(s, "model.init_scale={}", self.init_scale);
        s
    }

    /// Inverse of [`ModelConfig::to_kv`]; `get` looks up a `model.*` key.
    pub fn from_kv(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let field = |k: &str| {
            get(&format!("model.{k}")).ok_or_else(|| Error::Format(format!("missing model.{k}")))
        };
        let num = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad model.{k}")))
        };
        let real = |k: &str| -> Result<f64> {
            field(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad model.{k}")))
        };
        let cfg = ModelConfig {
            src_vocab: num("src_vocab")?,
            tgt_vocab: num("tgt_vocab")?,
            embed_dim: num("embed_dim")?,
            hidden_dim: num("hidden_dim")?,
            encoder_layers: num("encoder_layers")?,
            decoder_layers: num("decoder_layers")?,
            decoder_init: DecoderInit::parse(&field("decoder_init")?)?,
            init_scale: real("init_scale")?,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}
