//! Generates the desk-scale synthetic domain pair and prints a few facts about it.
//!
//! `cargo run --release --example generate_data -- [SEED] [OUT_DIR]`

use std::path::PathBuf;

use freezelab::data::{generate_domain_pair, source_types, write_domain_pair, CorpusSizes, DomainSpec};

fn main() -> freezelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let (ood, ind) = (DomainSpec::desk_ood(), DomainSpec::desk_ind());
    let pair = generate_domain_pair(seed, &ood, &ind, &CorpusSizes::desk())?;

    for (name, c) in [("ood.train", &pair.ood.train), ("ind.train", &pair.ind.train)] {
        let tokens: usize = c.src.iter().map(Vec::len).sum();
        println!(
            "{name}: {} pairs, {:.1} words per sentence, {} source types",
            c.len(),
            tokens as f64 / c.len() as f64,
            source_types(c).len()
        );
    }
    let (o, i) = (source_types(&pair.ood.train), source_types(&pair.ind.train));
    let shared = i.iter().filter(|w| o.contains(*w)).count();
    println!(
        "in-domain types also seen out of domain: {:.3} (lexicon share {:.3})",
        shared as f64 / i.len() as f64,
        ind.expected_overlap()
    );
    for (s, t) in pair.ind.train.src.iter().zip(&pair.ind.train.tgt).take(3) {
        println!("  {}  =>  {}", s.join(" "), t.join(" "));
    }

    if let Some(dir) = args.next().map(PathBuf::from) {
        write_domain_pair(&dir, &pair)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
