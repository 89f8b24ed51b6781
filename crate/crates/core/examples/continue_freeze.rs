//! Continued training under three freeze regimes, showing which parameters
//! moved and what each regime does to in-domain BLEU.

use freezelab::analysis::RmsReport;
use freezelab::eval::corpus_bleu;
use freezelab::experiment::{continue_regime, generate, train_ood, Settings};
use freezelab::model::{ParameterStore, Seq2Seq};
use freezelab::trainer::FreezeSpec;
use freezelab::Component;

fn main() -> freezelab::Result<()> {
    let mut settings = Settings::tiny();
    settings.train.max_checkpoints = 8;
    settings.cont.max_checkpoints = 6;
    let pair = generate(&settings, 1)?;
    let (codec, run) = train_ood(&settings, &pair, 1)?;
    let ood = run.best;
    let test = &pair.ind.test;
    let bleu = |store: &ParameterStore| {
        let model = Seq2Seq::new(&ood.config, store)?;
        corpus_bleu(&model, store, &codec, &test.src, &test.tgt, 1)
    };
    println!("unadapted: BLEU {:.2}", bleu(&ood.store)?);

    for spec in [
        FreezeSpec::None,
        FreezeSpec::freeze_one(Component::Encoder),
        FreezeSpec::FreezeAllBut(Component::Softmax),
    ] {
        let out = continue_regime(&settings, &ood, &codec, &pair, &spec, 1, 1)?.outcome;
        let rms = RmsReport::between(&ood.store, &out.best.store)?;
        println!("{}: BLEU {:.2}", spec.name(), bleu(&out.best.store)?);
        for (c, r) in &rms.rows {
            println!("  {c:<17} rms {r:.6}");
        }
    }
    Ok(())
}
