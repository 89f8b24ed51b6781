//! BLEU of a trained model as Gaussian noise is added to each component.

use freezelab::analysis::{sensitivity_sweep, sensitivity_tsv, EvalSet, SweepPlan};
use freezelab::experiment::{generate, train_ood, Settings};
use freezelab::model::Seq2Seq;
use freezelab::Component;

fn main() -> freezelab::Result<()> {
    let mut settings = Settings::tiny();
    settings.train.max_checkpoints = 8;
    let pair = generate(&settings, 1)?;
    let (codec, run) = train_ood(&settings, &pair, 1)?;
    let ck = run.best;
    let model = Seq2Seq::new(&ck.config, &ck.store)?;
    let plan = SweepPlan {
        sigmas: vec![0.0, 0.05, 0.2, 0.5],
        trials: 4,
        seed: 1,
        jobs: 1,
    };
    let test = &pair.ood.test;
    let eval = EvalSet {
        name: "ood.test",
        src: &test.src,
        refs: &test.tgt,
    };
    let curves = Component::ALL
        .iter()
        .map(|&c| sensitivity_sweep(&model, &ck.store, &codec, c, &plan, eval))
        .collect::<freezelab::Result<Vec<_>>>()?;
    print!("{}", sensitivity_tsv(&curves));
    Ok(())
}
