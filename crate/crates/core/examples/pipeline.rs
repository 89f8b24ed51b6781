//! The whole study for one seed: data, OOD training, eleven continued-training
//! regimes, RMS tables and sensitivity curves, written to a directory.
//!
//! `cargo run --release --example pipeline -- OUT_DIR [PRESET] [SEED]`

use std::path::PathBuf;

use freezelab::experiment::{report, run_experiment, Settings};

fn main() -> freezelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "experiment".into()));
    let preset = args.next().unwrap_or_else(|| "tiny".into());
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let settings = Settings::preset(&preset)?;
    let summary = run_experiment(&dir, &settings, seed, 1, "example pipeline")?;
    println!("OOD test BLEU {:.2}, unadapted in-domain {:.2}", summary.ood_test_bleu, summary.unadapted_bleu);
    print!("{}", report(&dir)?);
    print!("{}", summary.table5.tsv());
    Ok(())
}
