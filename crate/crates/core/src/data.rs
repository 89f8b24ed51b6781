//! Synthetic two-domain parallel corpora and plain-text corpus I/O.
//!
//! Source words are pseudo-words built from consonant-vowel syllables. Every
//! word belongs to one of [`WORD_CLASSES`] classes; a domain's templates are
//! class sequences and sentences fill each slot with a word of that class.
//! The two domains share a core vocabulary and each adds its own exclusive
//! words. Within a class, words are drawn with Zipfian frequencies whose
//! rank order is shuffled per template set. A target sentence maps every source word to a fixed target
//! pseudo-word, then reverses consecutive blocks of `reorder_window` words.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::distributions::WeightedIndex;

use crate::bpe::{detokenize, train_bpe, word_counts, BpeModel};
use crate::error::{Error, Result};
use crate::model::{Batch, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
use crate::nn::SeededRng;

pub const WORD_CLASSES: usize = 4;
const CONSONANTS: &[&str] = &["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// Shape of one synthetic domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    /// Words shared by both domains of a pair.
    pub core_vocab: usize,
    /// Words only this domain uses.
    pub exclusive_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seeds the template list and the word frequency ranks; equal ids give
    /// equal templates.
    pub template_set: u64,
    pub templates: usize,
    /// Seeds the source-to-target word mapping of this domain's words.
    pub remap_seed: u64,
    pub reorder_window: usize,
    /// Pseudo-words have 1 to this many syllables.
    pub max_syllables: usize,
    /// Exponent of the rank-frequency law within a class; 0 is uniform.
    pub zipf: f64,
}

impl DomainSpec {
    pub fn desk_ood() -> Self {
        DomainSpec {
            core_vocab: 300,
            exclusive_vocab: 150,
            min_len: 4,
            max_len: 14,
            template_set: 1,
            templates: 40,
            remap_seed: 7,
            reorder_window: 2,
            max_syllables: 2,
            zipf: 1.0,
        }
    }

    pub fn desk_ind() -> Self {
        DomainSpec {
            template_set: 2,
            remap_seed: 8,
            ..DomainSpec::desk_ood()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("domain spec: {m}")));
        if self.core_vocab < WORD_CLASSES {
            return bad("core vocabulary must cover every word class");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("length range must be non-empty and start at 1 or more");
        }
        if self.templates == 0 {
            return bad("need at least one template");
        }
        if self.max_syllables == 0 {
            return bad("words need at least one syllable");
        }
        if self.reorder_window == 0 {
            return bad("reorder window must be positive");
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return bad("zipf exponent must be finite and non-negative");
        }
        Ok(())
    }

    /// Fraction of this domain's source types also used by the other domain.
    pub fn expected_overlap(&self) -> f64 {
        self.core_vocab as f64 / (self.core_vocab + self.exclusive_vocab) as f64
    }
}

/// Number of sentence pairs per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSizes {
    pub ood_train: usize,
    pub ood_dev: usize,
    pub ood_test: usize,
    pub ind_train: usize,
    pub ind_dev: usize,
    pub ind_test: usize,
}

impl CorpusSizes {
    pub fn desk() -> Self {
        CorpusSizes {
            ood_train: 8000,
            ood_dev: 500,
            ood_test: 500,
            ind_train: 2000,
            ind_dev: 500,
            ind_test: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Aligned tokenized sentence pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
    pub split: Split,
}

impl ParallelCorpus {
    pub fn new(src: Vec<Vec<String>>, tgt: Vec<Vec<String>>, split: Split) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Format(format!(
                "{} source sentences but {} target sentences",
                src.len(),
                tgt.len()
            )));
        }
        if let Some(i) = src.iter().zip(&tgt).position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::Format(format!("empty sentence in pair {}", i + 1)));
        }
        Ok(ParallelCorpus { src, tgt, split })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainCorpora {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainPair {
    pub ood: DomainCorpora,
    pub ind: DomainCorpora,
}

struct Lexicon {
    /// Per class: source words and their target translations.
    classes: Vec<Vec<(String, String)>>,
}

fn pseudo_word(rng: &mut SeededRng, max_syllables: usize) -> String {
    let syllables = 1 + rng.below(max_syllables);
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                CONSONANTS[rng.below(CONSONANTS.len())],
                VOWELS[rng.below(VOWELS.len())]
            )
        })
        .collect()
}

fn fresh_words(n: usize, syl: usize, rng: &mut SeededRng, used: &mut HashSet<String>) -> Result<Vec<String>> {
    let space: usize = (1..=syl).map(|k| (CONSONANTS.len() * VOWELS.len()).pow(k as u32)).sum();
    if used.len() + n > space / 2 {
        return Err(Error::Invalid(format!("{n} more words do not fit in {syl}-syllable space")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, syl);
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

/// Deals word pairs round-robin over the classes.
fn add_words(lex: &mut Lexicon, src: Vec<String>, tgt: Vec<String>) {
    for (i, pair) in src.into_iter().zip(tgt).enumerate() {
        lex.classes[i % WORD_CLASSES].push(pair);
    }
}

struct Pool<'a> {
    words: Vec<&'a (String, String)>,
    weights: WeightedIndex<f64>,
}

fn pools<'a>(seed: u64, spec: &DomainSpec, core: &'a Lexicon, excl: &'a Lexicon) -> Vec<Pool<'a>> {
    let mut rng = SeededRng::new(seed).derive(&format!("ranks-{}", spec.template_set));
    (0..WORD_CLASSES)
        .map(|c| {
            let mut words: Vec<_> = core.classes[c].iter().chain(&excl.classes[c]).collect();
            rng.shuffle(&mut words);
            let w = (1..=words.len()).map(|r| (r as f64).powf(-spec.zipf));
            let weights = WeightedIndex::new(w).expect("every class pool is non-empty");
            Pool { words, weights }
        })
        .collect()
}

fn templates(seed: u64, spec: &DomainSpec) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::new(seed).derive(&format!("templates-{}", spec.template_set));
    (0..spec.templates)
        .map(|_| {
            let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
            (0..len).map(|_| rng.below(WORD_CLASSES)).collect()
        })
        .collect()
}

/// Reverses consecutive blocks of `window` tokens.
pub fn reorder_blocks<T: Clone>(tokens: &[T], window: usize) -> Vec<T> {
    tokens
        .chunks(window.max(1))
        .flat_map(|c| c.iter().rev().cloned())
        .collect()
}

fn sample_corpus(
    rng: &mut SeededRng,
    n: usize,
    templates: &[Vec<usize>],
    pools: &[Pool<'_>],
    window: usize,
    split: Split,
) -> Result<ParallelCorpus> {
    let mut src = Vec::with_capacity(n);
    let mut tgt = Vec::with_capacity(n);
    for _ in 0..n {
        let t = &templates[rng.below(templates.len())];
        let pairs: Vec<&(String, String)> = t
            .iter()
            .map(|&c| pools[c].words[rng.weighted(&pools[c].weights)])
            .collect();
        src.push(pairs.iter().map(|p| p.0.clone()).collect());
        let mapped: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
        tgt.push(reorder_blocks(&mapped, window));
    }
    ParallelCorpus::new(src, tgt, split)
}

/// Generates out-of-domain and in-domain train/dev/test corpora.
///
/// Core words and their translations come from `ood.remap_seed`; each
/// domain's exclusive words use its own seed. The result is a pure function
/// of the arguments.
pub fn generate_domain_pair(
    seed: u64,
    ood: &DomainSpec,
    ind: &DomainSpec,
    sizes: &CorpusSizes,
) -> Result<DomainPair> {
    ood.validate()?;
    ind.validate()?;
    if ood.core_vocab != ind.core_vocab {
        return Err(Error::Invalid(format!(
            "domains must share the core vocabulary ({} vs {})",
            ood.core_vocab, ind.core_vocab
        )));
    }
    let all = [
        sizes.ood_train,
        sizes.ood_dev,
        sizes.ood_test,
        sizes.ind_train,
        sizes.ind_dev,
        sizes.ind_test,
    ];
    if all.contains(&0) {
        return Err(Error::Invalid("every split needs at least one sentence".into()));
    }

    let root = SeededRng::new(seed);
    let mut src_used = HashSet::new();
    let mut tgt_used = HashSet::new();
    let mut src_rng = root.derive("source-words");
    let (so, si) = (ood.max_syllables, ind.max_syllables);
    let core_src = fresh_words(ood.core_vocab, so, &mut src_rng, &mut src_used)?;
    let ood_src = fresh_words(ood.exclusive_vocab, so, &mut src_rng, &mut src_used)?;
    let ind_src = fresh_words(ind.exclusive_vocab, si, &mut src_rng, &mut src_used)?;
    let mut ood_map = root.derive(&format!("remap-{}", ood.remap_seed));
    let core_tgt = fresh_words(ood.core_vocab, so, &mut ood_map, &mut tgt_used)?;
    let ood_tgt = fresh_words(ood.exclusive_vocab, so, &mut ood_map, &mut tgt_used)?;
    let mut ind_map = root.derive(&format!("remap-{}-in-domain", ind.remap_seed));
    let ind_tgt = fresh_words(ind.exclusive_vocab, si, &mut ind_map, &mut tgt_used)?;

    let empty = || Lexicon {
        classes: vec![Vec::new(); WORD_CLASSES],
    };
    let (mut core, mut ood_lex, mut ind_lex) = (empty(), empty(), empty());
    add_words(&mut core, core_src, core_tgt);
    add_words(&mut ood_lex, ood_src, ood_tgt);
    add_words(&mut ind_lex, ind_src, ind_tgt);
    let ood_pools = pools(seed, ood, &core, &ood_lex);
    let ind_pools = pools(seed, ind, &core, &ind_lex);
    let (ood_t, ind_t) = (templates(seed, ood), templates(seed, ind));

    let make = |tag: &str, spec: &DomainSpec, t: &[Vec<usize>], p: &[Pool<'_>], n: [usize; 3]| {
        let mut r = root.derive(&format!("{tag}-sentences"));
        Ok::<_, Error>(DomainCorpora {
            train: sample_corpus(&mut r, n[0], t, p, spec.reorder_window, Split::Train)?,
            dev: sample_corpus(&mut r, n[1], t, p, spec.reorder_window, Split::Dev)?,
            test: sample_corpus(&mut r, n[2], t, p, spec.reorder_window, Split::Test)?,
        })
    };
    Ok(DomainPair {
        ood: make("ood", ood, &ood_t, &ood_pools, [sizes.ood_train, sizes.ood_dev, sizes.ood_test])?,
        ind: make("ind", ind, &ind_t, &ind_pools, [sizes.ind_train, sizes.ind_dev, sizes.ind_test])?,
    })
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("{}: invalid UTF-8: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if toks.is_empty() {
            return Err(Error::Format(format!("{}: empty line {}", path.display(), i + 1)));
        }
        out.push(toks);
    }
    Ok(out)
}

/// Reads whitespace-tokenized parallel files (LF or CRLF line endings).
pub fn read_parallel_corpus(src_path: &Path, tgt_path: &Path, split: Split) -> Result<ParallelCorpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Format(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    ParallelCorpus::new(src, tgt, split)
}

fn join_lines(sents: &[Vec<String>]) -> String {
    let mut s = String::new();
    for sent in sents {
        s.push_str(&sent.join(" "));
        s.push('\n');
    }
    s
}

/// Writes `<dir>/<name>.src` and `<dir>/<name>.tgt`.
pub fn write_parallel_corpus(dir: &Path, name: &str, corpus: &ParallelCorpus) -> Result<()> {
    for (ext, sents) in [("src", &corpus.src), ("tgt", &corpus.tgt)] {
        let path = dir.join(format!("{name}.{ext}"));
        fs::write(&path, join_lines(sents)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Corpus file stems in a data directory, in a fixed order.
pub const CORPUS_FILES: [(&str, Split); 6] = [
    ("ood.train", Split::Train),
    ("ood.dev", Split::Dev),
    ("ood.test", Split::Test),
    ("ind.train", Split::Train),
    ("ind.dev", Split::Dev),
    ("ind.test", Split::Test),
];

pub fn write_domain_pair(dir: &Path, pair: &DomainPair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let parts = [
        &pair.ood.train,
        &pair.ood.dev,
        &pair.ood.test,
        &pair.ind.train,
        &pair.ind.dev,
        &pair.ind.test,
    ];
    for ((name, _), c) in CORPUS_FILES.iter().zip(parts) {
        write_parallel_corpus(dir, name, c)?;
    }
    Ok(())
}

pub fn read_domain_pair(dir: &Path) -> Result<DomainPair> {
    let mut parts = Vec::with_capacity(6);
    for (name, split) in CORPUS_FILES {
        parts.push(read_parallel_corpus(
            &dir.join(format!("{name}.src")),
            &dir.join(format!("{name}.tgt")),
            split,
        )?);
    }
    let mut it = parts.into_iter();
    let mut next = || it.next().expect("six corpora");
    Ok(DomainPair {
        ood: DomainCorpora {
            train: next(),
            dev: next(),
            test: next(),
        },
        ind: DomainCorpora {
            train: next(),
            dev: next(),
            test: next(),
        },
    })
}

/// Distinct source word types of a corpus.
pub fn source_types(corpus: &ParallelCorpus) -> HashSet<&str> {
    corpus.src.iter().flatten().map(String::as_str).collect()
}

/// Symbol-to-id table with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

impl Vocab {
    /// Reserved symbols, then corpus symbols by descending count, ties in byte order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Vec<String>>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(s, _)| !RESERVED.contains(s))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Vocab::from_symbols(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(s, _)| s.to_string()))
                .collect(),
        )
        .expect("reserved prefix present")
    }

    /// Rebuilds a table whose first four entries are the reserved symbols.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < RESERVED.len() || symbols[..4] != RESERVED.map(String::from) {
            return Err(Error::Format("vocabulary must start with the reserved symbols".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {s:?}")));
            }
        }
        Ok(Vocab { symbols, index })
    }

    /// Appends symbols not yet present, in sorted order.
    pub fn extend(mut self, symbols: &[String]) -> Self {
        let mut missing: Vec<&String> = symbols.iter().filter(|s| !self.index.contains_key(*s)).collect();
        missing.sort();
        missing.dedup();
        for s in missing {
            self.index.insert(s.clone(), self.symbols.len());
            self.symbols.push(s.clone());
        }
        self
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK_ID)
    }

    pub fn symbol(&self, id: usize) -> &str {
        self.symbols.get(id).map(String::as_str).unwrap_or(RESERVED[UNK_ID])
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|s| self.id(s)).collect()
    }

    /// Symbols for ids, stopping at EOS and skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS_ID)
            .filter(|&&i| i != PAD_ID && i != BOS_ID)
            .map(|&i| self.symbol(i).to_string())
            .collect()
    }
}

/// Sentence pairs as token ids, without BOS/EOS.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenCorpus {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl TokenCorpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt.iter().map(|t| t.len() + 1).sum()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            src: indices.iter().map(|&i| self.src[i].clone()).collect(),
            tgt: indices.iter().map(|&i| self.tgt[i].clone()).collect(),
        }
    }

    /// Consecutive batches in corpus order.
    pub fn sequential_batches(&self, size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }
}

/// Subword models and vocabularies for both languages.
///
/// Everything here is learned from out-of-domain training text only and then
/// applied unchanged to every other corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codec {
    pub src_bpe: BpeModel,
    pub tgt_bpe: BpeModel,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

impl Codec {
    pub fn train(corpus: &ParallelCorpus, bpe_vocab: usize) -> Result<Self> {
        let counts = |side: &[Vec<String>]| word_counts(side.iter().map(|s| s.join(" ")).collect::<Vec<_>>().iter().map(String::as_str));
        let src_bpe = train_bpe(&counts(&corpus.src), bpe_vocab)?;
        let tgt_bpe = train_bpe(&counts(&corpus.tgt), bpe_vocab)?;
        let src_vocab = Vocab::build(&src_bpe.apply_corpus(&corpus.src)).extend(src_bpe.vocabulary());
        let tgt_vocab = Vocab::build(&tgt_bpe.apply_corpus(&corpus.tgt)).extend(tgt_bpe.vocabulary());
        Ok(Codec {
            src_bpe,
            tgt_bpe,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn encode_source(&self, sentences: &[Vec<String>]) -> Vec<Vec<usize>> {
        self.src_bpe
            .apply_corpus(sentences)
            .iter()
            .map(|s| self.src_vocab.encode(s))
            .collect()
    }

    pub fn encode(&self, corpus: &ParallelCorpus) -> TokenCorpus {
        TokenCorpus {
            src: self.encode_source(&corpus.src),
            tgt: self
                .tgt_bpe
                .apply_corpus(&corpus.tgt)
                .iter()
                .map(|s| self.tgt_vocab.encode(s))
                .collect(),
        }
    }

    /// Target ids back to words (subwords merged).
    pub fn decode_target(&self, ids: &[usize]) -> Vec<String> {
        detokenize(&self.tgt_vocab.decode(ids))
    }

    /// Entries stored in checkpoint metadata.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let merges = |m: &BpeModel| {
            m.merges()
                .iter()
                .map(|(l, r)| format!("{l} {r}"))
                .collect::<Vec<_>>()
                .join("\t")
        };
        vec![
            ("codec.src_bpe".into(), merges(&self.src_bpe)),
            ("codec.tgt_bpe".into(), merges(&self.tgt_bpe)),
            ("codec.src_vocab".into(), self.src_vocab.symbols().join(" ")),
            ("codec.tgt_vocab".into(), self.tgt_vocab.symbols().join(" ")),
        ]
    }

    pub fn from_meta(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let field = |k: &str| get(k).ok_or_else(|| Error::Format(format!("missing {k}")));
        let bpe = |k: &str| -> Result<BpeModel> {
            let v = field(k)?;
            let lines: Vec<&str> = if v.is_empty() { Vec::new() } else { v.split('\t').collect() };
            BpeModel::from_text(&format!("bpe-v1 {}\n{}\n", lines.len(), lines.join("\n")))
        };
        let vocab = |k: &str| -> Result<Vocab> {
            Vocab::from_symbols(field(k)?.split(' ').map(str::to_string).collect())
        };
        Ok(Codec {
            src_bpe: bpe("codec.src_bpe")?,
            tgt_bpe: bpe("codec.tgt_bpe")?,
            src_vocab: vocab("codec.src_vocab")?,
            tgt_vocab: vocab("codec.tgt_vocab")?,
        })
    }
}
