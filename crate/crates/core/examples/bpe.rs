//! Learns BPE merges on out-of-domain text and segments in-domain sentences.

use freezelab::bpe::{detokenize, train_bpe, word_counts};
use freezelab::data::{generate_domain_pair, CorpusSizes, DomainSpec};

fn main() -> freezelab::Result<()> {
    let pair = generate_domain_pair(1, &DomainSpec::desk_ood(), &DomainSpec::desk_ind(), &CorpusSizes::desk())?;
    let lines: Vec<String> = pair.ood.train.src.iter().map(|s| s.join(" ")).collect();
    let model = train_bpe(&word_counts(lines.iter().map(String::as_str)), 200)?;
    println!("{} merges, first five: {:?}", model.merges().len(), &model.merges()[..5]);

    for s in pair.ind.test.src.iter().take(3) {
        let pieces = model.apply_sentence(s);
        println!("{}\n  -> {}", s.join(" "), pieces.join(" "));
        assert_eq!(detokenize(&pieces), *s);
    }
    Ok(())
}
