use crate::error::{Error, Result};
use crate::model::{Component, DecoderInit, ModelConfig, ParameterStore};
use crate::nn::{Graph, ParamId, SeededRng, Tensor, Var, PAD_ID};

pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Creates every parameter of the model, drawn from `uniform(-s, s)` in a fixed order.
pub fn build_model(config: &ModelConfig, rng: &mut SeededRng) -> Result<ParameterStore> {
    config.validate()?;
    let (e, h, s) = (config.embed_dim, config.hidden_dim, config.init_scale);
    let half = h / 2;
    let mut store = ParameterStore::new();
    let mut add = |name: String, c: Component, shape: &[usize]| {
        store.add(&name, c, Tensor::uniform(shape, -s, s, rng)).map(|_| ())
    };
    use Component::*;

    add("src_embed.weight".into(), SourceEmbedding, &[config.src_vocab, e])?;

    for dir in ["fwd", "bwd"] {
        add(format!("encoder.l0.{dir}.weight"), Encoder, &[e + half, 4 * half])?;
        add(format!("encoder.l0.{dir}.bias"), Encoder, &[4 * half])?;
    }
    for l in 1..config.encoder_layers {
        add(format!("encoder.l{l}.weight"), Encoder, &[2 * h, 4 * h])?;
        add(format!("encoder.l{l}.bias"), Encoder, &[4 * h])?;
    }

    if config.decoder_init == DecoderInit::EncoderLast {
        for l in 0..config.decoder_layers {
            for part in ["h", "c"] {
                add(format!("decoder.init.l{l}.{part}.weight"), Decoder, &[h, h])?;
                add(format!("decoder.init.l{l}.{part}.bias"), Decoder, &[h])?;
            }
        }
    }
    add("decoder.l0.weight".into(), Decoder, &[e + 2 * h, 4 * h])?;
    add("decoder.l0.bias".into(), Decoder, &[4 * h])?;
    for l in 1..config.decoder_layers {
        add(format!("decoder.l{l}.weight"), Decoder, &[2 * h, 4 * h])?;
        add(format!("decoder.l{l}.bias"), Decoder, &[4 * h])?;
    }
    add("decoder.proj.weight".into(), Decoder, &[2 * h, h])?;
    add("decoder.proj.bias".into(), Decoder, &[h])?;

    add("softmax.weight".into(), Softmax, &[h, config.tgt_vocab])?;
    add("softmax.bias".into(), Softmax, &[config.tgt_vocab])?;

    add("tgt_embed.weight".into(), TargetEmbedding, &[config.tgt_vocab, e])?;
    Ok(store)
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    src_embed: ParamId,
    enc_fwd: Layer,
    enc_bwd: Layer,
    enc_upper: Vec<Layer>,
    dec_init: Vec<(Layer, Layer)>,
    dec: Vec<Layer>,
    proj: Layer,
    out: Layer,
    tgt_embed: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LayerVars {
    w: Var,
    b: Var,
}

/// Parameter leaves of one graph.
#[derive(Debug)]
pub struct Bound {
    src_embed: Var,
    enc_fwd: LayerVars,
    enc_bwd: LayerVars,
    enc_upper: Vec<LayerVars>,
    dec_init: Vec<(LayerVars, LayerVars)>,
    dec: Vec<LayerVars>,
    proj: LayerVars,
    out: LayerVars,
    tgt_embed: Var,
}

/// Inverted dropout on RNN layer outputs.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
    rng: SeededRng,
}

impl Dropout {
    pub fn new(p: f64, rng: SeededRng) -> Self {
        Dropout { p, rng }
    }

    pub fn rng(&self) -> &SeededRng {
        &self.rng
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask = (0..g.value(x).len())
            .map(|_| if self.rng.bernoulli(self.p) { 0.0 } else { keep })
            .collect();
        g.mul_const(x, mask)
    }
}

fn maybe_drop(dropout: &mut Option<&mut Dropout>, g: &mut Graph, x: Var) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// Encoder output for a batch.
#[derive(Debug)]
pub struct Encoded {
    /// Top-layer states, `[len x batch x hidden]`.
    pub memory: Var,
    pub lengths: Vec<usize>,
    /// First-layer forward-direction states per step.
    pub forward: Vec<Var>,
    /// First-layer backward-direction states per step.
    pub backward: Vec<Var>,
    /// Output of every encoder layer per step (layer-major).
    pub layers: Vec<Vec<Var>>,
}

/// Recurrent decoder state between steps.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    /// Previous attentional vector, fed back into the first layer.
    pub attentional: Var,
}

impl DecoderState {
    /// Keeps only the given batch rows (in the given order), e.g. for beam search.
    pub fn select(&self, g: &mut Graph, rows: &[usize]) -> Result<DecoderState> {
        let pick = |g: &mut Graph, v: Var| g.gather_rows(v, rows);
        let mut h = Vec::with_capacity(self.h.len());
        let mut c = Vec::with_capacity(self.c.len());
        for (&hv, &cv) in self.h.iter().zip(&self.c) {
            h.push(pick(g, hv)?);
            c.push(pick(g, cv)?);
        }
        let attentional = pick(g, self.attentional)?;
        Ok(DecoderState { h, c, attentional })
    }
}

/// A batch of sentence pairs as token ids, without BOS/EOS.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// The encoder-decoder bound to a parameter layout.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    config: ModelConfig,
    ids: Ids,
}

impl Seq2Seq {
    pub fn new(config: &ModelConfig, store: &ParameterStore) -> Result<Self> {
        config.validate()?;
        let layer = |prefix: &str| -> Result<Layer> {
            Ok(Layer {
                w: store.id(&format!("{prefix}.weight"))?,
                b: store.id(&format!("{prefix}.bias"))?,
            })
        };
        let dec_init = if config.decoder_init == DecoderInit::EncoderLast {
            (0..config.decoder_layers)
                .map(|l| {
                    Ok((
                        layer(&format!("decoder.init.l{l}.h"))?,
                        layer(&format!("decoder.init.l{l}.c"))?,
                    ))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let ids = Ids {
            src_embed: store.id("src_embed.weight")?,
            enc_fwd: layer("encoder.l0.fwd")?,
            enc_bwd: layer("encoder.l0.bwd")?,
            enc_upper: (1..config.encoder_layers)
                .map(|l| layer(&format!("encoder.l{l}")))
                .collect::<Result<_>>()?,
            dec_init,
            dec: (0..config.decoder_layers)
                .map(|l| layer(&format!("decoder.l{l}")))
                .collect::<Result<_>>()?,
            proj: layer("decoder.proj")?,
            out: layer("softmax")?,
            tgt_embed: store.id("tgt_embed.weight")?,
        };
        let check = |id: ParamId, shape: &[usize]| -> Result<()> {
            let p = store.get(id);
            if p.value.shape() != shape {
                return Err(Error::Shape(format!(
                    "{} is {:?}, config needs {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            Ok(())
        };
        check(ids.src_embed, &[config.src_vocab, config.embed_dim])?;
        check(ids.tgt_embed, &[config.tgt_vocab, config.embed_dim])?;
        check(ids.out.w, &[config.hidden_dim, config.tgt_vocab])?;
        check(ids.enc_fwd.w, &[config.embed_dim + config.hidden_dim / 2, 2 * config.hidden_dim])?;
        check(ids.dec[0].w, &[config.embed_dim + 2 * config.hidden_dim, 4 * config.hidden_dim])?;
        Ok(Seq2Seq {
            config: config.clone(),
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Puts every parameter on the tape once.
    pub fn bind(&self, g: &mut Graph, store: &ParameterStore) -> Bound {
        let lv = |g: &mut Graph, l: Layer| LayerVars {
            w: g.param(store, l.w),
            b: g.param(store, l.b),
        };
        Bound {
            src_embed: g.param(store, self.ids.src_embed),
            enc_fwd: lv(g, self.ids.enc_fwd),
            enc_bwd: lv(g, self.ids.enc_bwd),
            enc_upper: self.ids.enc_upper.iter().map(|&l| lv(g, l)).collect(),
            dec_init: self
                .ids
                .dec_init
                .iter()
                .map(|&(a, b)| (lv(g, a), lv(g, b)))
                .collect(),
            dec: self.ids.dec.iter().map(|&l| lv(g, l)).collect(),
            proj: lv(g, self.ids.proj),
            out: lv(g, self.ids.out),
            tgt_embed: g.param(store, self.ids.tgt_embed),
        }
    }

    /// Runs the encoder over a batch of source sentences.
    ///
    /// Layer 1 is bidirectional with `hidden/2` units per direction; the
    /// backward direction starts at each sentence's last real token.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        src: &[Vec<usize>],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Encoded> {
        if src.is_empty() || src.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("empty source sentence".into()));
        }
        if let Some(&bad) = src.iter().flatten().find(|&&id| id >= self.config.src_vocab) {
            return Err(Error::Invalid(format!("source id {bad} out of vocabulary")));
        }
        let n = src.len();
        let lengths: Vec<usize> = src.iter().map(Vec::len).collect();
        let len = *lengths.iter().max().unwrap();
        let h = self.config.hidden_dim;
        let half = h / 2;

        let emb: Vec<Var> = (0..len)
            .map(|t| {
                let ids: Vec<usize> = src.iter().map(|s| s.get(t).copied().unwrap_or(PAD_ID)).collect();
                g.gather_rows(p.src_embed, &ids)
            })
            .collect::<Result<_>>()?;

        let zeros_half = g.constant(Tensor::zeros(&[n, half]));
        let (mut hf, mut cf) = (zeros_half, zeros_half);
        let mut forward = Vec::with_capacity(len);
        for &x in &emb {
            (hf, cf) = g.lstm_cell(x, hf, cf, p.enc_fwd.w, p.enc_fwd.b)?;
            forward.push(hf);
        }

        let (mut hb, mut cb) = (zeros_half, zeros_half);
        let mut backward = vec![zeros_half; len];
        for t in (0..len).rev() {
            let (h2, c2) = g.lstm_cell(emb[t], hb, cb, p.enc_bwd.w, p.enc_bwd.b)?;
            if lengths.iter().all(|&l| t < l) {
                (hb, cb) = (h2, c2);
            } else {
                let mask: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
                hb = g.blend(h2, hb, mask.clone())?;
                cb = g.blend(c2, cb, mask)?;
            }
            backward[t] = hb;
        }

        let mut layers = Vec::with_capacity(self.config.encoder_layers);
        let mut outputs = Vec::with_capacity(len);
        for t in 0..len {
            let cat = g.concat_cols(&[forward[t], backward[t]])?;
            outputs.push(maybe_drop(&mut dropout, g, cat)?);
        }
        layers.push(outputs);

        let zeros = g.constant(Tensor::zeros(&[n, h]));
        for lv in &p.enc_upper {
            let prev = layers.last().unwrap();
            let (mut hs, mut cs) = (zeros, zeros);
            let mut outputs = Vec::with_capacity(len);
            for &x in prev {
                (hs, cs) = g.lstm_cell(x, hs, cs, lv.w, lv.b)?;
                outputs.push(maybe_drop(&mut dropout, g, hs)?);
            }
            layers.push(outputs);
        }

        let memory = g.stack(layers.last().unwrap())?;
        Ok(Encoded {
            memory,
            lengths,
            forward,
            backward,
            layers,
        })
    }

    /// Initial decoder state for an encoded batch.
    pub fn initial_state(&self, g: &mut Graph, p: &Bound, enc: &Encoded) -> Result<DecoderState> {
        let n = enc.lengths.len();
        let h = self.config.hidden_dim;
        let zeros = g.constant(Tensor::zeros(&[n, h]));
        let layers = self.config.decoder_layers;
        match self.config.decoder_init {
            DecoderInit::Zeros => Ok(DecoderState {
                h: vec![zeros; layers],
                c: vec![zeros; layers],
                attentional: zeros,
            }),
            DecoderInit::EncoderLast => {
                let last: Vec<usize> = enc.lengths.iter().map(|&l| l - 1).collect();
                let fin = g.select_steps(enc.memory, &last)?;
                let mut hs = Vec::with_capacity(layers);
                let mut cs = Vec::with_capacity(layers);
                for (lh, lc) in &p.dec_init {
                    let a = g.affine(fin, lh.w, lh.b)?;
                    hs.push(g.tanh(a));
                    let a = g.affine(fin, lc.w, lc.b)?;
                    cs.push(g.tanh(a));
                }
                Ok(DecoderState {
                    h: hs,
                    c: cs,
                    attentional: zeros,
                })
            }
        }
    }

    /// One decoder step: embeds `prev` tokens, runs the LSTM stack with input
    /// feeding, attends over the encoder memory and returns output logits.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        state: &DecoderState,
        prev: &[usize],
        enc: &Encoded,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Var, DecoderState)> {
        if let Some(&bad) = prev.iter().find(|&&id| id >= self.config.tgt_vocab) {
            return Err(Error::Invalid(format!("target id {bad} out of vocabulary")));
        }
        let emb = g.gather_rows(p.tgt_embed, prev)?;
        let mut x = g.concat_cols(&[emb, state.attentional])?;
        let mut hs = Vec::with_capacity(p.dec.len());
        let mut cs = Vec::with_capacity(p.dec.len());
        for (l, lv) in p.dec.iter().enumerate() {
            let (h2, c2) = g.lstm_cell(x, state.h[l], state.c[l], lv.w, lv.b)?;
            hs.push(h2);
            cs.push(c2);
            x = maybe_drop(&mut dropout, g, h2)?;
        }
        let ctx = g.attention(x, enc.memory, &enc.lengths)?;
        let cat = g.concat_cols(&[x, ctx])?;
        let pre = g.affine(cat, p.proj.w, p.proj.b)?;
        let attentional = g.tanh(pre);
        let logits = g.affine(attentional, p.out.w, p.out.b)?;
        Ok((
            logits,
            DecoderState {
                h: hs,
                c: cs,
                attentional,
            },
        ))
    }

    /// Teacher-forced label-smoothed cross-entropy, averaged over target
    /// tokens (EOS included). Returns the loss node and the token count.
    pub fn forward_loss(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        batch: &Batch,
        smoothing: f64,
        mean: bool,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Var, usize)> {
        if batch.is_empty() || batch.src.len() != batch.tgt.len() {
            return Err(Error::Invalid("empty or misaligned batch".into()));
        }
        if batch.tgt.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("empty target sentence".into()));
        }
        let p = self.bind(g, store);
        let enc = self.encode(g, &p, &batch.src, dropout.as_deref_mut())?;
        let mut state = self.initial_state(g, &p, &enc)?;
        let steps = batch.tgt.iter().map(Vec::len).max().unwrap() + 1;
        let mut logits = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * batch.len());
        for t in 0..steps {
            let prev: Vec<usize> = batch
                .tgt
                .iter()
                .map(|y| match t {
                    0 => BOS_ID,
                    _ => y.get(t - 1).copied().unwrap_or(PAD_ID),
                })
                .collect();
            targets.extend(batch.tgt.iter().map(|y| match t.cmp(&y.len()) {
                std::cmp::Ordering::Less => y[t],
                std::cmp::Ordering::Equal => EOS_ID,
                std::cmp::Ordering::Greater => PAD_ID,
            }));
            let (l, next) = self.decode_step(g, &p, &state, &prev, &enc, dropout.as_deref_mut())?;
            logits.push(l);
            state = next;
        }
        let all = g.concat_rows(&logits)?;
        let loss = g.cross_entropy(all, &targets, smoothing, mean)?;
        let count = g.token_count(loss);
        Ok((loss, count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> (ModelConfig, ParameterStore) {
        let mut cfg = ModelConfig::desk(7, 7);
        cfg.embed_dim = 4;
        cfg.hidden_dim = 4;
        let store = build_model(&cfg, &mut SeededRng::new(3)).unwrap();
        (cfg, store)
    }

    #[test]
    fn same_seed_same_store() {
        let cfg = ModelConfig::desk(40, 50);
        let a = build_model(&cfg, &mut SeededRng::new(11)).unwrap();
        let b = build_model(&cfg, &mut SeededRng::new(11)).unwrap();
        assert!(a.values_bits_eq(&b));
        let c = build_model(&cfg, &mut SeededRng::new(12)).unwrap();
        assert!(!a.values_bits_eq(&c));
    }

    #[test]
    fn every_component_present() {
        let (_, store) = micro();
        let tags: std::collections::BTreeSet<_> = store.iter().map(|(_, p)| p.component).collect();
        assert_eq!(tags.into_iter().collect::<Vec<_>>(), Component::ALL.to_vec());
        assert!(store.iter().all(|(_, p)| p
            .value
            .data()
            .iter()
            .all(|v| v.abs() <= 0.1)));
    }

    #[test]
    fn single_token_encoding_shape() {
        let (cfg, store) = micro();
        let m = Seq2Seq::new(&cfg, &store).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, &store);
        let enc = m.encode(&mut g, &p, &[vec![5]], None).unwrap();
        assert_eq!(g.value(enc.memory).shape(), &[1, 1, 4]);
        assert!(m.encode(&mut g, &p, &[vec![]], None).is_err());
        assert!(m.encode(&mut g, &p, &[vec![7]], None).is_err());
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let (cfg, mut store) = micro();
        store.iter_mut().for_each(|p| p.value.fill(0.0));
        let m = Seq2Seq::new(&cfg, &store).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, &store);
        let enc = m.encode(&mut g, &p, &[vec![4, 5, 6]], None).unwrap();
        assert!(g.value(enc.memory).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_softmax_gives_zero_logits() {
        let (cfg, mut store) = micro();
        store.component_mut(Component::Softmax).for_each(|p| p.value.fill(0.0));
        let m = Seq2Seq::new(&cfg, &store).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, &store);
        let enc = m.encode(&mut g, &p, &[vec![4, 5]], None).unwrap();
        let s0 = m.initial_state(&mut g, &p, &enc).unwrap();
        let (logits, _) = m.decode_step(&mut g, &p, &s0, &[BOS_ID], &enc, None).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_batch_matches_single_sentences() {
        let (cfg, store) = micro();
        let m = Seq2Seq::new(&cfg, &store).unwrap();
        let pairs = [(vec![4, 5, 6, 4], vec![5, 6]), (vec![6], vec![4, 4, 5])];
        let mut total = 0.0;
        for (s, t) in &pairs {
            let mut g = Graph::new();
            let b = Batch { src: vec![s.clone()], tgt: vec![t.clone()] };
            let (l, _) = m.forward_loss(&mut g, &store, &b, 0.0, false, None).unwrap();
            total += g.scalar(l);
        }
        let mut g = Graph::new();
        let b = Batch {
            src: pairs.iter().map(|p| p.0.clone()).collect(),
            tgt: pairs.iter().map(|p| p.1.clone()).collect(),
        };
        let (l, count) = m.forward_loss(&mut g, &store, &b, 0.0, false, None).unwrap();
        assert_eq!(count, 2 + 1 + 3 + 1);
        assert!((g.scalar(l) - total).abs() < 1e-12);
    }
}
