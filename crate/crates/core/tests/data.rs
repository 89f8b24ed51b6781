//! Synthetic corpora: determinism, vocabulary overlap, file reading and a
//! run-the-pipeline check that identical domains score alike.

use std::collections::HashMap;
use std::fs;

use freezelab::data::{
    generate_domain_pair, read_domain_pair, read_parallel_corpus, reorder_blocks, source_types, write_domain_pair,
    CorpusSizes, DomainSpec, Split,
};
use freezelab::eval::corpus_bleu;
use freezelab::experiment::{train_ood, Settings};
use freezelab::model::Seq2Seq;
use freezelab::Error;
use proptest::prelude::*;

fn small_sizes() -> CorpusSizes {
    CorpusSizes {
        ood_train: 300,
        ood_dev: 20,
        ood_test: 20,
        ind_train: 100,
        ind_dev: 20,
        ind_test: 20,
    }
}

#[test]
fn same_seed_same_corpora() {
    let (o, i) = (DomainSpec::desk_ood(), DomainSpec::desk_ind());
    let a = generate_domain_pair(3, &o, &i, &small_sizes()).unwrap();
    let b = generate_domain_pair(3, &o, &i, &small_sizes()).unwrap();
    assert_eq!(a, b);
    let c = generate_domain_pair(4, &o, &i, &small_sizes()).unwrap();
    assert_ne!(a.ood.train, c.ood.train);
}

#[test]
fn zero_sized_split_rejected() {
    let sizes = CorpusSizes {
        ind_test: 0,
        ..small_sizes()
    };
    let r = generate_domain_pair(1, &DomainSpec::desk_ood(), &DomainSpec::desk_ind(), &sizes);
    assert!(matches!(r, Err(Error::Invalid(_))));
}

#[test]
fn observed_overlap_matches_spec() {
    // Flat and skewed word frequencies; the desk corpora are large enough
    // that every type shows up either way.
    for zipf in [0.0, 1.0] {
        let ood = DomainSpec {
            zipf,
            ..DomainSpec::desk_ood()
        };
        let ind = DomainSpec {
            zipf,
            ..DomainSpec::desk_ind()
        };
        let pair = generate_domain_pair(11, &ood, &ind, &CorpusSizes::desk()).unwrap();
        let ood_types = source_types(&pair.ood.train);
        let ind_types = source_types(&pair.ind.train);
        let shared = ind_types.iter().filter(|w| ood_types.contains(*w)).count();
        let observed = shared as f64 / ind_types.len() as f64;
        assert!((observed - ind.expected_overlap()).abs() < 0.05, "zipf {zipf}: {observed}");
    }
}

#[test]
fn targets_are_a_consistent_reordered_word_mapping() {
    let pair = generate_domain_pair(2, &DomainSpec::desk_ood(), &DomainSpec::desk_ind(), &small_sizes()).unwrap();
    for corpus in [&pair.ood.train, &pair.ind.train] {
        let mut map: HashMap<&str, String> = HashMap::new();
        for (s, t) in corpus.src.iter().zip(&corpus.tgt) {
            assert_eq!(s.len(), t.len());
            let aligned = reorder_blocks(t, DomainSpec::desk_ood().reorder_window);
            for (a, b) in s.iter().zip(aligned) {
                let prev = map.entry(a.as_str()).or_insert_with(|| b.clone());
                assert_eq!(*prev, b, "{a} maps to two words");
            }
        }
    }
}

#[test]
fn crlf_and_lf_files_read_identically() {
    let dir = tempfile::tempdir().unwrap();
    let lines = ["ba di ku", "lo", "ze ma pi no"];
    let write = |name: &str, sep: &str| {
        let p = dir.path().join(name);
        fs::write(&p, lines.iter().map(|l| format!("{l}{sep}")).collect::<String>()).unwrap();
        p
    };
    let (lf_s, lf_t) = (write("lf.src", "\n"), write("lf.tgt", "\n"));
    let (cr_s, cr_t) = (write("cr.src", "\r\n"), write("cr.tgt", "\r\n"));
    let lf = read_parallel_corpus(&lf_s, &lf_t, Split::Dev).unwrap();
    let cr = read_parallel_corpus(&cr_s, &cr_t, Split::Dev).unwrap();
    assert_eq!(lf, cr);
    assert_eq!(lf.len(), 3);
    assert_eq!(lf.src[2], ["ze", "ma", "pi", "no"]);
}

#[test]
fn malformed_files_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("a"), "x y\nz\n").unwrap();
    fs::write(p("b"), "x\n").unwrap();
    fs::write(p("gap"), "x\n\nz\n").unwrap();
    fs::write(p("three"), "x\ny\nz\n").unwrap();
    fs::write(p("bytes"), [0x66, 0xff, 0x0a]).unwrap();
    let read = |s: &str, t: &str| read_parallel_corpus(&p(s), &p(t), Split::Train);
    assert!(matches!(read("a", "b"), Err(Error::Format(_))));
    assert!(matches!(read("gap", "three"), Err(Error::Format(_))));
    assert!(matches!(read("bytes", "b"), Err(Error::Format(_))));
    assert!(matches!(read("missing", "b"), Err(Error::Io { .. })));
}

#[test]
fn domain_pair_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let pair = generate_domain_pair(5, &DomainSpec::desk_ood(), &DomainSpec::desk_ind(), &small_sizes()).unwrap();
    write_domain_pair(dir.path(), &pair).unwrap();
    assert_eq!(read_domain_pair(dir.path()).unwrap(), pair);
}

#[test]
fn identical_domains_score_alike() {
    let mut s = Settings::tiny();
    for d in [&mut s.ood, &mut s.ind] {
        d.core_vocab = 24;
        d.exclusive_vocab = 0;
        d.max_len = 6;
        d.template_set = 1;
    }
    s.sizes = CorpusSizes {
        ood_train: 1500,
        ood_dev: 100,
        ood_test: 400,
        ind_train: 10,
        ind_dev: 10,
        ind_test: 400,
    };
    s.model.embed_dim = 24;
    s.model.hidden_dim = 24;
    s.train.checkpoint_interval = Some(100);
    s.train.max_checkpoints = 15;
    let pair = generate_domain_pair(1, &s.ood, &s.ind, &s.sizes).unwrap();
    let (codec, run) = train_ood(&s, &pair, 1).unwrap();
    let ck = &run.best;
    let model = Seq2Seq::new(&ck.config, &ck.store).unwrap();
    let score = |c: &freezelab::data::ParallelCorpus| corpus_bleu(&model, &ck.store, &codec, &c.src, &c.tgt, 1).unwrap();
    let (ood, ind) = (score(&pair.ood.test), score(&pair.ind.test));
    eprintln!("OOD {ood} in-domain {ind}");
    assert!(ood > 20.0, "model did not learn: {ood}");
    assert!((ood - ind).abs() <= 2.0, "OOD {ood} vs in-domain {ind}");
}

proptest! {
    #[test]
    fn block_reordering_is_an_involution(v in prop::collection::vec(0u8..50, 0..20), w in 1usize..5) {
        prop_assert_eq!(reorder_blocks(&reorder_blocks(&v, w), w), v);
    }
}
