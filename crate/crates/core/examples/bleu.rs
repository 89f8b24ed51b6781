//! Corpus BLEU from raw n-gram statistics, and perplexity of an untrained model.

use freezelab::data::TokenCorpus;
use freezelab::eval::{bleu, perplexity, BleuStats};
use freezelab::model::{build_model, ModelConfig, Seq2Seq};
use freezelab::nn::SeededRng;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn main() -> freezelab::Result<()> {
    let hyps = vec![words("the cat sat on the mat"), words("the the the the the the the")];
    let refs = vec![words("the cat is on the mat"), words("a dog barks")];
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(&refs) {
        stats.add(h, r);
    }
    println!("matches {:?} of {:?}, hyp {} ref {}", stats.matches, stats.totals, stats.hyp_len, stats.ref_len);
    println!("BLEU {:.4}", bleu(&hyps, &refs)?);
    println!("identical corpus: {}", bleu(&refs, &refs)?);

    let cfg = ModelConfig::desk(20, 20);
    let store = build_model(&cfg, &mut SeededRng::new(1))?;
    let model = Seq2Seq::new(&cfg, &store)?;
    let corpus = TokenCorpus {
        src: vec![vec![4, 5, 6], vec![7, 8]],
        tgt: vec![vec![9, 10], vec![11, 12, 13]],
    };
    println!("untrained perplexity {:.3} (vocabulary 20)", perplexity(&model, &store, &corpus)?);
    Ok(())
}
