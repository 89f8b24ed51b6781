//! Trains a small out-of-domain model and reports its BLEU in and out of domain.
//!
//! `cargo run --release --example train_ood -- [PRESET]` (tiny by default; desk takes minutes)

use freezelab::eval::corpus_bleu;
use freezelab::experiment::{generate, train_ood, Settings};
use freezelab::model::Seq2Seq;
use freezelab::trainer::log_tsv;

fn main() -> freezelab::Result<()> {
    let preset = std::env::args().nth(1).unwrap_or_else(|| "tiny".into());
    let settings = Settings::preset(&preset)?;
    let pair = generate(&settings, 1)?;
    let (codec, run) = train_ood(&settings, &pair, 1)?;
    print!("{}", log_tsv(&run.log));
    println!("{} updates, best checkpoint {}", run.steps, run.best.index);

    let ck = &run.best;
    let model = Seq2Seq::new(&ck.config, &ck.store)?;
    for (name, test) in [("ood.test", &pair.ood.test), ("ind.test", &pair.ind.test)] {
        let b = corpus_bleu(&model, &ck.store, &codec, &test.src, &test.tgt, settings.beam)?;
        println!("BLEU {name}: {b:.2}");
    }
    Ok(())
}
