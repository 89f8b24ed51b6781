//! Subword learning checked against a naive reference implementation.

use std::collections::BTreeMap;

use freezelab::bpe::{detokenize, learn_merges, train_bpe, BpeModel, END_OF_WORD};
use proptest::prelude::*;

/// Expands every occurrence, counts pairs by linear search and merges in place.
fn reference_merges(corpus: &[(&str, usize)], n: usize) -> Vec<(String, String)> {
    let mut occurrences: Vec<Vec<String>> = Vec::new();
    for (w, c) in corpus {
        for _ in 0..*c {
            let chars: Vec<char> = w.chars().collect();
            let mut syms: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
            if let Some(last) = syms.last_mut() {
                last.push_str(END_OF_WORD);
            }
            occurrences.push(syms);
        }
    }
    let mut merges = Vec::new();
    for _ in 0..n {
        let mut table: Vec<((String, String), usize)> = Vec::new();
        for occ in &occurrences {
            for i in 1..occ.len() {
                let key = (occ[i - 1].clone(), occ[i].clone());
                match table.iter_mut().find(|(k, _)| *k == key) {
                    Some(e) => e.1 += 1,
                    None => table.push((key, 1)),
                }
            }
        }
        let mut best: Option<((String, String), usize)> = None;
        for (k, c) in table {
            let better = match &best {
                None => true,
                Some((bk, bc)) => c > *bc || (c == *bc && k < *bk),
            };
            if better {
                best = Some((k, c));
            }
        }
        let Some(((l, r), _)) = best else { break };
        for occ in occurrences.iter_mut() {
            let mut out = Vec::new();
            let mut i = 0;
            while i < occ.len() {
                if i + 1 < occ.len() && occ[i] == l && occ[i + 1] == r {
                    out.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    out.push(occ[i].clone());
                    i += 1;
                }
            }
            *occ = out;
        }
        merges.push((l, r));
    }
    merges
}

fn to_counts(corpus: &[(&str, usize)]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for (w, c) in corpus {
        *m.entry(w.to_string()).or_insert(0) += c;
    }
    m
}

#[test]
fn classic_low_lower_newest_widest() {
    let corpus = [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)];
    let m = learn_merges(&to_counts(&corpus), 10).unwrap();
    assert_eq!(m.merges(), reference_merges(&corpus, 10).as_slice());
    assert_eq!(m.merges()[0], ("e".into(), "s".into()));
    assert_eq!(m.merges()[1], ("es".into(), "t</w>".into()));
}

#[test]
fn trained_model_survives_file_round_trip() {
    let corpus = [("abab", 4), ("baba", 3), ("cab", 5)];
    let m = train_bpe(&to_counts(&corpus), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codes.bpe");
    m.save(&path).unwrap();
    let back = BpeModel::load(&path).unwrap();
    assert_eq!(back.merges(), m.merges());
    for w in ["abab", "cabba", "zz"] {
        assert_eq!(back.apply(w), m.apply(w));
    }
}

#[test]
fn missing_file_is_io_error() {
    let err = BpeModel::load(std::path::Path::new("/nonexistent/codes.bpe")).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

proptest! {
    #[test]
    fn merges_match_reference(
        words in prop::collection::vec(("[abc]{1,6}", 1usize..5), 1..7),
        n in 0usize..12,
    ) {
        let corpus: Vec<(&str, usize)> = words.iter().map(|(w, c)| (w.as_str(), *c)).collect();
        let m = learn_merges(&to_counts(&corpus), n).unwrap();
        let expected = reference_merges(&corpus, n);
        prop_assert_eq!(m.merges(), expected.as_slice());
    }

    #[test]
    fn segmentation_round_trips(
        train in prop::collection::vec("[a-e]{1,7}", 1..10),
        text in prop::collection::vec("[a-g]{1,8}", 0..10),
        vocab in 1usize..40,
    ) {
        let pairs: Vec<(&str, usize)> = train.iter().map(|w| (w.as_str(), 1)).collect();
        let counts = to_counts(&pairs);
        let m = train_bpe(&counts, vocab).unwrap();
        prop_assert_eq!(detokenize(&m.apply_sentence(&text)), text);
    }
}
