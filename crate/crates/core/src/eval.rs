//! Decoding, corpus BLEU and perplexity.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::data::{Codec, TokenCorpus};
use crate::error::{Error, Result};
use crate::model::{Batch, ParameterStore, Seq2Seq, BOS_ID, EOS_ID, PAD_ID};
use crate::nn::kernels::log_sum_exp;
use crate::nn::Graph;

const EVAL_BATCH: usize = 64;

/// Sentence indices grouped into batches of similar source length.
fn length_sorted_batches(lengths: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.sort_by_key(|&i| lengths[i]);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

/// `exp(total cross-entropy / target tokens)` without label smoothing.
/// EOS counts as a token.
pub fn perplexity(model: &Seq2Seq, store: &ParameterStore, corpus: &TokenCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Invalid("perplexity of an empty corpus".into()));
    }
    let lengths: Vec<usize> = corpus.src.iter().map(Vec::len).collect();
    let mut total = 0.0;
    let mut tokens = 0;
    let mut g = Graph::new();
    for idx in length_sorted_batches(&lengths, EVAL_BATCH) {
        g.reset();
        let (loss, count) = model.forward_loss(&mut g, store, &corpus.batch(&idx), 0.0, false, None)?;
        total += g.scalar(loss);
        tokens += count;
    }
    Ok((total / tokens as f64).exp())
}

/// Log-softmax of one row of logits.
fn log_probs(row: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(row);
    row.iter().map(|x| x - z).collect()
}

/// Index of the largest entry, skipping PAD and BOS; ties go to the lower id.
fn argmax_token(row: &[f64]) -> usize {
    let mut best = EOS_ID;
    for (i, &v) in row.iter().enumerate() {
        if i != PAD_ID && i != BOS_ID && v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of a batch; sentence `i` stops at EOS or after `max_lens[i]` tokens.
pub fn greedy_decode_batch(
    model: &Seq2Seq,
    store: &ParameterStore,
    src: &[Vec<usize>],
    max_lens: &[usize],
) -> Result<Vec<Vec<usize>>> {
    if src.len() != max_lens.len() {
        return Err(Error::Invalid("one max length per sentence required".into()));
    }
    if max_lens.contains(&0) {
        return Err(Error::Invalid("max_len must be positive".into()));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, store);
    let enc = model.encode(&mut g, &p, src, None)?;
    let mut state = model.initial_state(&mut g, &p, &enc)?;
    let n = src.len();
    let mut out = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut prev = vec![BOS_ID; n];
    let steps = *max_lens.iter().max().unwrap();
    for _ in 0..steps {
        let (logits, next) = model.decode_step(&mut g, &p, &state, &prev, &enc, None)?;
        let lv = g.value(logits);
        for i in 0..n {
            if done[i] {
                prev[i] = PAD_ID;
                continue;
            }
            let tok = argmax_token(lv.row(i));
            if tok == EOS_ID {
                done[i] = true;
                prev[i] = PAD_ID;
            } else {
                out[i].push(tok);
                prev[i] = tok;
                done[i] = out[i].len() >= max_lens[i];
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
        state = next;
    }
    Ok(out)
}

pub fn greedy_decode(model: &Seq2Seq, store: &ParameterStore, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    Ok(greedy_decode_batch(model, store, &[src.to_vec()], &[max_len])?.remove(0))
}

/// A scored output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities (EOS included when finished).
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability per scored token.
    pub fn normalized(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.finished);
        self.log_prob / n.max(1) as f64
    }
}

/// Teacher-forced score of `tokens` (followed by EOS when `finished`).
pub fn score_hypothesis(
    model: &Seq2Seq,
    store: &ParameterStore,
    src: &[usize],
    tokens: &[usize],
    finished: bool,
) -> Result<Hypothesis> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, store);
    let enc = model.encode(&mut g, &p, &[src.to_vec()], None)?;
    let mut state = model.initial_state(&mut g, &p, &enc)?;
    let mut prev = BOS_ID;
    let mut log_prob = 0.0;
    let targets = tokens.iter().copied().chain(finished.then_some(EOS_ID));
    for tok in targets {
        let (logits, next) = model.decode_step(&mut g, &p, &state, &[prev], &enc, None)?;
        log_prob += log_probs(g.value(logits).row(0))[tok];
        state = next;
        prev = tok;
    }
    Ok(Hypothesis {
        tokens: tokens.to_vec(),
        log_prob,
        finished,
    })
}

/// Beam search ranked by length-normalised log-probability.
///
/// The greedy output is scored as well and wins if it ranks higher, so a
/// wider beam never returns a worse-scoring hypothesis than beam 1.
pub fn beam_decode(
    model: &Seq2Seq,
    store: &ParameterStore,
    src: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Invalid("beam size and max_len must be positive".into()));
    }
    let greedy = greedy_decode(model, store, src, max_len)?;
    // Greedy output of full length was cut off before EOS.
    let greedy_done = greedy.len() < max_len;
    let greedy = score_hypothesis(model, store, src, &greedy, greedy_done)?;
    if beam == 1 {
        return Ok(greedy);
    }

    let mut g = Graph::new();
    let p = model.bind(&mut g, store);
    let enc = model.encode(&mut g, &p, &vec![src.to_vec(); beam], None)?;
    let mut state = model.initial_state(&mut g, &p, &enc)?;
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let prev: Vec<usize> = (0..beam)
            .map(|r| alive.get(r).and_then(|h| h.0.last().copied()).unwrap_or(BOS_ID))
            .collect();
        let (logits, next) = model.decode_step(&mut g, &p, &state, &prev, &enc, None)?;
        let lv = g.value(logits).clone();
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (r, (_, score)) in alive.iter().enumerate() {
            for (tok, lp) in log_probs(lv.row(r)).into_iter().enumerate() {
                if tok != PAD_ID && tok != BOS_ID {
                    cands.push((score + lp, r, tok));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next_alive = Vec::with_capacity(beam);
        let mut rows = Vec::with_capacity(beam);
        for (score, r, tok) in cands {
            if next_alive.len() == beam {
                break;
            }
            if tok == EOS_ID {
                finished.push(Hypothesis {
                    tokens: alive[r].0.clone(),
                    log_prob: score,
                    finished: true,
                });
            } else if step + 1 == max_len {
                let mut t = alive[r].0.clone();
                t.push(tok);
                finished.push(Hypothesis {
                    tokens: t,
                    log_prob: score,
                    finished: false,
                });
                next_alive.push((Vec::new(), 0.0));
            } else {
                let mut t = alive[r].0.clone();
                t.push(tok);
                next_alive.push((t, score));
                rows.push(r);
            }
        }
        if rows.is_empty() || finished.len() >= beam {
            break;
        }
        while rows.len() < beam {
            rows.push(rows[0]);
        }
        state = next.select(&mut g, &rows)?;
        alive = next_alive;
    }
    let best = finished
        .into_iter()
        .chain(std::iter::once(greedy))
        .fold(None::<Hypothesis>, |acc, h| match acc {
            Some(a) if a.normalized() >= h.normalized() => Some(a),
            _ => Some(h),
        })
        .expect("greedy hypothesis always present");
    Ok(best)
}

/// Output-length cap used when translating a source sentence.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 10
}

/// Translates word-level sentences and returns detokenized words.
pub fn translate(
    model: &Seq2Seq,
    store: &ParameterStore,
    codec: &Codec,
    sentences: &[Vec<String>],
    beam: usize,
) -> Result<Vec<Vec<String>>> {
    let src = codec.encode_source(sentences);
    let mut out = vec![Vec::new(); src.len()];
    if beam <= 1 {
        let lengths: Vec<usize> = src.iter().map(Vec::len).collect();
        for idx in length_sorted_batches(&lengths, EVAL_BATCH) {
            let batch: Vec<Vec<usize>> = idx.iter().map(|&i| src[i].clone()).collect();
            let caps: Vec<usize> = batch.iter().map(|s| default_max_len(s.len())).collect();
            for (i, ids) in idx.iter().zip(greedy_decode_batch(model, store, &batch, &caps)?) {
                out[*i] = codec.decode_target(&ids);
            }
        }
    } else {
        for (i, s) in src.iter().enumerate() {
            let h = beam_decode(model, store, s, beam, default_max_len(s.len()))?;
            out[i] = codec.decode_target(&h.tokens);
        }
    }
    Ok(out)
}

/// Clipped n-gram statistics of a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    m
}

impl BleuStats {
    pub fn add<S: AsRef<str>>(&mut self, hyp: &[S], reference: &[S]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    /// BLEU in [0, 100]. A zero unigram precision gives 0; a zero higher-order
    /// precision is replaced by `1 / (total + 1)` (add-one smoothing).
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..4 {
            let p = if self.matches[n] == 0 {
                1.0 / (self.totals[n] + 1) as f64
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_p += p.ln();
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_p / 4.0).exp()
    }
}

/// Corpus-level BLEU over word sequences.
pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h, r);
    }
    Ok(stats.score())
}

/// One `score\tmetric\tdataset` row.
pub fn metric_row(score: f64, metric: &str, dataset: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{score:.4}\t{metric}\t{dataset}");
    s
}

/// Convenience: builds the model view of a store and translates and scores a corpus.
pub fn corpus_bleu(
    model: &Seq2Seq,
    store: &ParameterStore,
    codec: &Codec,
    src: &[Vec<String>],
    refs: &[Vec<String>],
    beam: usize,
) -> Result<f64> {
    let hyps = translate(model, store, codec, src, beam)?;
    bleu(&hyps, refs)
}

/// Loss of a single batch, for tests and diagnostics.
pub fn batch_loss(model: &Seq2Seq, store: &ParameterStore, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let (l, _) = model.forward_loss(&mut g, store, batch, 0.0, false, None)?;
    Ok(g.scalar(l))
}
