//! Command-line front end; `main.rs` only forwards to [`run`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{sensitivity_raw_tsv, sensitivity_sweep, sensitivity_tsv, EvalSet, RmsReport, SweepPlan};
use crate::bpe::{train_bpe, word_counts, BpeModel};
use crate::data::{read_domain_pair, read_parallel_corpus, write_domain_pair, Codec, ParallelCorpus, Split};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, metric_row, perplexity};
use crate::experiment::{
    continue_regime, corpus_hashes, generate, load_settings, report, run_experiment, train_ood, training_data_hash,
    write_manifest, Settings,
};
use crate::model::{Component, Seq2Seq};
use crate::nn::RNG_ALGORITHM;
use crate::trainer::{log_tsv, Checkpoint, FreezeSpec};

#[derive(Parser, Debug)]
#[command(name = "freezelab", version, about = "Freezing-subnetworks study of continued training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Preset, settings file and per-key overrides shared by several commands.
#[derive(Args, Debug, Clone)]
pub struct SettingsArgs {
    /// Base preset: desk, tiny or paper.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Settings file applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr=0.005`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl SettingsArgs {
    fn load(&self) -> Result<Settings> {
        let mut s = load_settings(&self.preset, self.config.as_deref())?;
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects SECTION.KEY=VALUE, got {o:?}")))?;
            let (section, key) = key
                .split_once('.')
                .ok_or_else(|| Error::Usage(format!("--set key {key:?} lacks a section")))?;
            s.set(section, key, value)
                .map_err(|e| Error::Usage(format!("--set {o}: {e}")))?;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpora of one seed.
    GenData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Learn BPE merges from a text file.
    TrainBpe {
        #[arg(long)]
        vocab_size: usize,
        #[arg(long = "in")]
        input: PathBuf,
        /// Output merges file.
        #[arg(long)]
        model: PathBuf,
    },
    /// Segment a text file with learned merges.
    ApplyBpe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the out-of-domain model.
    TrainOod {
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continued training on the in-domain data under a freeze regime.
    Continue(ContinueArgs),
    /// Score a checkpoint on `<test>.src` / `<test>.tgt`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Path prefix of the parallel test files.
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "bleu", value_parser = ["bleu", "ppl"])]
        metric: String,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-component RMS difference between two checkpoints.
    AnalyzeRms {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BLEU under Gaussian noise added to one component (or `all`).
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        component: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.3,0.5,0.75,1")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Aggregated output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-trial output.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Consolidated BLEU table of an experiment directory.
    Report {
        #[arg(long)]
        experiment_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whole pipeline for one seed in a single process.
    Run {
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args, Debug)]
pub struct ContinueArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Components to freeze, comma-separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["freeze_all_but", "no_freeze"])]
    pub freeze: Vec<String>,
    /// The only component left trainable.
    #[arg(long, conflicts_with = "no_freeze")]
    pub freeze_all_but: Option<String>,
    #[arg(long)]
    pub no_freeze: bool,
    /// Sweep these rates (default: the five-rate grid) instead of one run.
    #[arg(long, value_delimiter = ',', num_args = 0.., conflicts_with = "lr")]
    pub lr_sweep: Option<Vec<f64>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub settings: SettingsArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

impl ContinueArgs {
    fn freeze_spec(&self) -> Result<FreezeSpec> {
        match (&self.freeze[..], &self.freeze_all_but, self.no_freeze) {
            ([], None, true) => Ok(FreezeSpec::None),
            ([], Some(c), false) => Ok(FreezeSpec::FreezeAllBut(c.parse()?)),
            (list, None, false) if !list.is_empty() => {
                let set = list.iter().map(|c| c.parse()).collect::<Result<_>>()?;
                Ok(FreezeSpec::Freeze(set))
            }
            _ => Err(Error::Usage(
                "choose exactly one of --freeze, --freeze-all-but or --no-freeze".into(),
            )),
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let line = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    match execute(cli.command, &line) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("freezelab: {e}");
            e.exit_code()
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_test(prefix: &Path) -> Result<ParallelCorpus> {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(format!(".{ext}"));
        PathBuf::from(s)
    };
    read_parallel_corpus(&with("src"), &with("tgt"), Split::Test)
}

fn codec_of(ck: &Checkpoint) -> Result<Codec> {
    Codec::from_meta(|k| ck.meta.get(k).cloned())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn execute(command: Command, line: &str) -> Result<()> {
    match command {
        Command::GenData {
            seed,
            settings,
            out_dir,
        } => {
            let s = settings.load()?;
            write_domain_pair(&out_dir, &generate(&s, seed)?)?;
            let mut m = corpus_hashes(&out_dir)?;
            m.insert("command".into(), line.to_string());
            m.insert("seed".into(), seed.to_string());
            m.insert("rng".into(), RNG_ALGORITHM.into());
            write_manifest(&out_dir.join("manifest"), &m, &s)
        }
        Command::TrainBpe {
            vocab_size,
            input,
            model,
        } => {
            let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            train_bpe(&word_counts(text.lines()), vocab_size)?.save(&model)
        }
        Command::ApplyBpe { model, input, out } => {
            let bpe = BpeModel::load(&model)?;
            let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let mut s = String::new();
            for l in text.lines() {
                let words: Vec<String> = l.split_whitespace().map(str::to_string).collect();
                s.push_str(&bpe.apply_sentence(&words).join(" "));
                s.push('\n');
            }
            write(&out, &s)
        }
        Command::TrainOod {
            settings,
            seed,
            data_dir,
            out,
        } => {
            let s = settings.load()?;
            let pair = read_domain_pair(&data_dir)?;
            let (_, run) = train_ood(&s, &pair, seed)?;
            run.best.save(&out)?;
            write(&sibling(&out, ".log.tsv"), &log_tsv(&run.log))
        }
        Command::Continue(args) => {
            let spec = args.freeze_spec()?;
            let mut s = args.settings.load()?;
            if let Some(lr) = args.lr {
                s.lrs = vec![lr];
            }
            if let Some(lrs) = &args.lr_sweep {
                s.lrs = if lrs.is_empty() {
                    crate::trainer::SWEEP_LRS.to_vec()
                } else {
                    lrs.clone()
                };
            }
            s.validate()?;
            let ood = Checkpoint::load(&args.from)?;
            let pair = read_domain_pair(&args.data_dir)?;
            let data = training_data_hash(&pair);
            match ood.meta.get("data.ood_train_sha256") {
                Some(h) if *h != data => {
                    return Err(Error::ConfigMismatch {
                        checkpoint: h.clone(),
                        data,
                    })
                }
                _ => {}
            }
            let codec = codec_of(&ood)?;
            let run = continue_regime(&s, &ood, &codec, &pair, &spec, args.seed, args.jobs)?;
            run.outcome.best.save(&args.out)?;
            write(&sibling(&args.out, ".log.tsv"), &log_tsv(&run.outcome.log))?;
            if let Some(t) = run.sweep_tsv {
                write(&sibling(&args.out, ".sweep.tsv"), &t)?;
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            test,
            metric,
            beam,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let codec = codec_of(&ck)?;
            let corpus = read_test(&test)?;
            let model = Seq2Seq::new(&ck.config, &ck.store)?;
            let name = test.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned());
            let score = if metric == "bleu" {
                corpus_bleu(&model, &ck.store, &codec, &corpus.src, &corpus.tgt, beam)?
            } else {
                perplexity(&model, &ck.store, &codec.encode(&corpus))?
            };
            emit(out.as_deref(), &metric_row(score, &metric, &name))
        }
        Command::AnalyzeRms { a, b, out } => {
            let (a, b) = (Checkpoint::load(&a)?, Checkpoint::load(&b)?);
            emit(out.as_deref(), &RmsReport::between(&a.store, &b.store)?.tsv())
        }
        Command::Sensitivity {
            checkpoint,
            component,
            sigmas,
            trials,
            test,
            seed,
            jobs,
            out,
            raw,
        } => {
            let components = if component == "all" {
                Component::ALL.to_vec()
            } else {
                vec![component.parse()?]
            };
            let ck = Checkpoint::load(&checkpoint)?;
            let codec = codec_of(&ck)?;
            let corpus = read_test(&test)?;
            let model = Seq2Seq::new(&ck.config, &ck.store)?;
            let plan = SweepPlan {
                sigmas,
                trials,
                seed,
                jobs,
            };
            let name = test.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned());
            let eval = EvalSet {
                name: &name,
                src: &corpus.src,
                refs: &corpus.tgt,
            };
            let curves = components
                .iter()
                .map(|&c| sensitivity_sweep(&model, &ck.store, &codec, c, &plan, eval))
                .collect::<Result<Vec<_>>>()?;
            if let Some(r) = raw {
                write(&r, &sensitivity_raw_tsv(&curves))?;
            }
            emit(out.as_deref(), &sensitivity_tsv(&curves))
        }
        Command::Report { experiment_dir, out } => emit(out.as_deref(), &report(&experiment_dir)?),
        Command::Run {
            settings,
            seed,
            out_dir,
            jobs,
        } => {
            let s = settings.load()?;
            let summary = run_experiment(&out_dir, &s, seed, jobs, line)?;
            let mut m = BTreeMap::new();
            m.insert("unadapted_bleu", summary.unadapted_bleu);
            m.insert("full_gain", summary.full_gain());
            for (k, v) in m {
                println!("{k}\t{v:.4}");
            }
            print!("{}", report(&out_dir)?);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("freezelab").chain(args.iter().copied()))
    }

    #[test]
    fn freeze_flags() {
        let spec = |args: &[&str]| match parse(args).unwrap().command {
            Command::Continue(c) => c.freeze_spec(),
            _ => unreachable!(),
        };
        let base = ["continue", "--from", "a", "--data-dir", "d", "--out", "o"];
        let with = |extra: &[&'static str]| [&base[..], extra].concat();
        assert_eq!(spec(&with(&["--no-freeze"])).unwrap(), FreezeSpec::None);
        assert_eq!(
            spec(&with(&["--freeze-all-but", "encoder"])).unwrap(),
            FreezeSpec::FreezeAllBut(Component::Encoder)
        );
        match spec(&with(&["--freeze", "encoder,softmax"])).unwrap() {
            FreezeSpec::Freeze(s) => assert_eq!(s.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(spec(&base).is_err());
        assert!(parse(&with(&["--freeze", "encoder", "--no-freeze"])).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["freezelab", "bogus"]), 2);
        assert_eq!(run(["freezelab", "report"]), 2);
    }

    #[test]
    fn missing_files_exit_3() {
        assert_eq!(run(["freezelab", "analyze-rms", "--a", "/nonexistent/a", "--b", "/nonexistent/b"]), 3);
    }
}
