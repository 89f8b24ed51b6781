//! Byte-pair-encoding subword segmentation.
//!
//! Words are split into characters with [`END_OF_WORD`] appended to the last
//! one, so `low` starts as `l o w</w>`. Training greedily merges the most
//! frequent adjacent pair; ties go to the lexicographically smallest
//! `(left, right)` pair. Characters never seen in training pass through as
//! single-character symbols (the model vocabulary maps them to UNK).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
const HEADER: &str = "bpe-v1";

/// Ordered merge list plus the resulting symbol inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vec<String>,
}

/// Initial symbols of a word.
pub fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Counts whitespace-separated words of a text corpus.
pub fn word_counts<'a>(lines: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Learns up to `n_merges` merges from word frequencies.
///
/// Stops early when no adjacent pair is left.
pub fn learn_merges(counts: &BTreeMap<String, usize>, n_merges: usize) -> Result<BpeModel> {
    let mut words: Vec<(Vec<String>, usize)> = counts
        .iter()
        .filter(|(w, &c)| !w.is_empty() && c > 0)
        .map(|(w, &c)| (split_word(w), c))
        .collect();
    if words.is_empty() {
        return Err(Error::Invalid("empty BPE training corpus".into()));
    }
    let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let mut vocab: Vec<String> = alphabet.iter().cloned().collect();
    let mut seen = alphabet;
    let mut merges = Vec::with_capacity(n_merges);

    while merges.len() < n_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += c;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((left, right)) = best else { break };
        for (syms, _) in words.iter_mut() {
            if syms.len() > 1 {
                *syms = merge_pair(syms, &left, &right);
            }
        }
        let joined = format!("{left}{right}");
        if seen.insert(joined.clone()) {
            vocab.push(joined);
        }
        merges.push((left, right));
    }
    Ok(BpeModel::with_vocab(merges, vocab))
}

/// Learns merges until the symbol inventory reaches `vocab_size`.
///
/// The inventory is the character alphabet (with end-of-word variants) plus
/// one new symbol per merge, so at most `vocab_size - |alphabet|` merges run.
pub fn train_bpe(counts: &BTreeMap<String, usize>, vocab_size: usize) -> Result<BpeModel> {
    let alphabet: BTreeSet<String> = counts
        .iter()
        .filter(|(w, &c)| !w.is_empty() && c > 0)
        .flat_map(|(w, _)| split_word(w))
        .collect();
    let mut model = learn_merges(counts, vocab_size.saturating_sub(alphabet.len()))?;
    // A merge can recreate an existing symbol; top up until the target is met or pairs run out.
    while model.vocab.len() < vocab_size {
        let more = vocab_size - model.vocab.len();
        let bigger = learn_merges(counts, model.merges.len() + more)?;
        if bigger.merges.len() == model.merges.len() {
            break;
        }
        model = bigger;
    }
    Ok(model)
}

/// Joins subword symbols back into words at [`END_OF_WORD`] markers.
///
/// A trailing fragment without a marker still becomes a word.
pub fn detokenize<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for s in subwords {
        let s = s.as_ref();
        if let Some(stem) = s.strip_suffix(END_OF_WORD) {
            cur.push_str(stem);
            words.push(std::mem::take(&mut cur));
        } else {
            cur.push_str(s);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

impl BpeModel {
    fn with_vocab(merges: Vec<(String, String)>, vocab: Vec<String>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        BpeModel {
            merges,
            ranks,
            vocab,
        }
    }

    /// A model from an explicit merge list; its vocabulary lists the symbols the merges touch.
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let mut seen = BTreeSet::new();
        let mut vocab = Vec::new();
        for (l, r) in &merges {
            for s in [l.clone(), r.clone(), format!("{l}{r}")] {
                if seen.insert(s.clone()) {
                    vocab.push(s);
                }
            }
        }
        BpeModel::with_vocab(merges, vocab)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    /// Segments one word by applying merges in rank order.
    pub fn apply(&self, word: &str) -> Vec<String> {
        let mut syms = split_word(word);
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            syms = merge_pair(&syms, l, r);
        }
        syms
    }

    /// Segments a whitespace-tokenized sentence.
    pub fn apply_sentence<S: AsRef<str>>(&self, words: &[S]) -> Vec<String> {
        words.iter().flat_map(|w| self.apply(w.as_ref())).collect()
    }

    /// Segments many sentences, memoising repeated words.
    pub fn apply_corpus(&self, sentences: &[Vec<String>]) -> Vec<Vec<String>> {
        let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
        sentences
            .iter()
            .map(|s| {
                s.iter()
                    .flat_map(|w| cache.entry(w).or_insert_with(|| self.apply(w)).clone())
                    .collect()
            })
            .collect()
    }

    /// `bpe-v1 <n_merges>` header, then one `left right` line per merge.
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} {}\n", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty BPE model file".into()))?;
        let n: usize = match header.trim_end_matches('\r').split_once(' ') {
            Some((HEADER, n)) => n
                .parse()
                .map_err(|_| Error::Format(format!("bad merge count in {header:?}")))?,
            _ => return Err(Error::Format(format!("bad BPE header {header:?}"))),
        };
        let mut merges = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => return Err(Error::Format(format!("bad merge on line {}: {line:?}", i + 2))),
            }
        }
        if merges.len() != n {
            return Err(Error::Format(format!(
                "header announces {n} merges, file has {}",
                merges.len()
            )));
        }
        Ok(BpeModel::from_merges(merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        BpeModel::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(words: &[(&str, usize)]) -> BTreeMap<String, usize> {
        words.iter().map(|(w, c)| (w.to_string(), *c)).collect()
    }

    #[test]
    fn single_word_single_merge() {
        let m = learn_merges(&counts(&[("aa", 1)]), 1).unwrap();
        assert_eq!(m.merges(), &[("a".to_string(), format!("a{END_OF_WORD}"))]);
    }

    #[test]
    fn zero_merges_split_to_characters() {
        let m = learn_merges(&counts(&[("low", 3)]), 0).unwrap();
        assert_eq!(m.apply("lower"), vec!["l", "o", "w", "e", "r</w>"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(learn_merges(&BTreeMap::new(), 3).is_err());
        assert!(train_bpe(&counts(&[("", 4)]), 10).is_err());
    }

    #[test]
    fn empty_word_gives_empty_sequence() {
        let m = learn_merges(&counts(&[("ab", 2)]), 1).unwrap();
        assert!(m.apply("").is_empty());
        assert!(detokenize::<String>(&[]).is_empty());
    }

    #[test]
    fn frequent_word_becomes_one_token() {
        let c = counts(&[("banana", 50), ("band", 3), ("nab", 2)]);
        let m = learn_merges(&c, 20).unwrap();
        assert_eq!(m.apply("banana"), vec![format!("banana{END_OF_WORD}")]);
    }

    #[test]
    fn vocab_size_is_respected() {
        let c = counts(&[("low", 5), ("lowest", 2), ("newer", 6), ("wider", 3)]);
        for target in [5, 14, 20, 30, 200] {
            let m = train_bpe(&c, target).unwrap();
            assert!(m.vocabulary().len() <= target.max(14), "target {target}");
        }
    }

    #[test]
    fn file_round_trip() {
        let c = counts(&[("low", 5), ("lowest", 2), ("newer", 6), ("wider", 3)]);
        let m = learn_merges(&c, 6).unwrap();
        let back = BpeModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back.merges(), m.merges());
        assert!(m.to_text().starts_with("bpe-v1 6\n"));
        assert!(BpeModel::from_text("bpe-v1 2\na b\n").is_err());
        assert!(BpeModel::from_text("bpe-v2 0\n").is_err());
        assert!(BpeModel::from_text("bpe-v1 1\na b c\n").is_err());
    }

    #[test]
    fn unseen_characters_pass_through() {
        let m = learn_merges(&counts(&[("abc", 4)]), 5).unwrap();
        let segs = m.apply("xyz");
        assert_eq!(detokenize(&segs), vec!["xyz"]);
    }

    proptest! {
        #[test]
        fn apply_then_detokenize_is_identity(words in prop::collection::vec("[a-h]{1,9}", 1..8)) {
            let c = counts(&[("abcab", 7), ("bead", 3), ("faced", 2), ("hedge", 5)]);
            let m = learn_merges(&c, 25).unwrap();
            let segs = m.apply_sentence(&words);
            prop_assert_eq!(detokenize(&segs), words);
        }
    }
}
