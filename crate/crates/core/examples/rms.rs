//! Per-component RMS difference between two checkpoint files.
//!
//! `cargo run --release --example rms -- A.ckpt B.ckpt`

use std::path::Path;

use freezelab::analysis::RmsReport;
use freezelab::trainer::Checkpoint;

fn main() -> freezelab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [a, b] = &args[..] else {
        eprintln!("usage: rms A.ckpt B.ckpt");
        std::process::exit(2);
    };
    let (a, b) = (Checkpoint::load(Path::new(a))?, Checkpoint::load(Path::new(b))?);
    print!("{}", RmsReport::between(&a.store, &b.store)?.tsv());
    Ok(())
}
