//! Experiment settings, the end-to-end pipeline and its reports.
//!
//! A settings file is line-oriented UTF-8: `[section]` headers (`data`,
//! `model`, `train`, `continue`, `analysis`), `key = value` lines and `#`
//! comments. Every key has a preset default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{
    build_table5, sensitivity_raw_tsv, sensitivity_sweep, sensitivity_tsv, EvalSet, RmsReport, SensitivityCurve,
    SweepPlan, Table5,
};
use crate::data::{generate_domain_pair, write_domain_pair, Codec, CorpusSizes, DomainPair, DomainSpec, CORPUS_FILES};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, metric_row};
use crate::model::{build_model, Component, DecoderInit, ModelConfig, Seq2Seq};
use crate::nn::{SeededRng, RNG_ALGORITHM};
use crate::trainer::{
    continued_training, log_tsv, lr_sweep, sha256_hex, train, Checkpoint, FreezeSpec, TrainConfig, TrainOutcome,
};

/// Everything that determines an experiment apart from its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub ood: DomainSpec,
    pub ind: DomainSpec,
    pub sizes: CorpusSizes,
    pub bpe_vocab: usize,
    /// Architecture; the vocabulary sizes are replaced by the codec's.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Continued-training settings; `lr` is ignored in favour of `lrs`.
    pub cont: TrainConfig,
    /// Continued-training learning rates; more than one runs a sweep.
    pub lrs: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub beam: usize,
}

pub const PRESETS: [&str; 3] = ["desk", "tiny", "paper"];

impl Settings {
    /// Default synthetic setup: minutes per seed on one core.
    pub fn desk() -> Self {
        Settings {
            ood: DomainSpec::desk_ood(),
            ind: DomainSpec::desk_ind(),
            sizes: CorpusSizes::desk(),
            bpe_vocab: 200,
            model: ModelConfig::desk(0, 0),
            train: TrainConfig::ood_desk(),
            cont: TrainConfig::continued_desk(),
            lrs: vec![0.01],
            sigmas: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0],
            trials: 8,
            beam: 1,
        }
    }

    /// Seconds-long smoke configuration for tests and examples.
    pub fn tiny() -> Self {
        let mut s = Settings::desk();
        for d in [&mut s.ood, &mut s.ind] {
            d.core_vocab = 40;
            d.exclusive_vocab = 20;
            d.max_len = 8;
            d.templates = 10;
        }
        s.sizes = CorpusSizes {
            ood_train: 400,
            ood_dev: 40,
            ood_test: 40,
            ind_train: 120,
            ind_dev: 40,
            ind_test: 40,
        };
        s.bpe_vocab = 60;
        s.model.embed_dim = 12;
        s.model.hidden_dim = 12;
        s.train.max_checkpoints = 4;
        s.cont.max_checkpoints = 2;
        s.sigmas = vec![0.0, 0.1, 0.5];
        s.trials = 2;
        s
    }

    /// The published model and optimisation settings on the synthetic task.
    /// Far too slow for one core; kept for parameter counts and dry runs.
    pub fn paper() -> Self {
        let mut s = Settings::desk();
        s.bpe_vocab = 30_000;
        s.model = ModelConfig::paper(0, 0);
        s.train.lr = 0.0003;
        s.train.batch_size = 128;
        s.cont.batch_size = 128;
        s.lrs = crate::trainer::SWEEP_LRS.to_vec();
        s
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Settings::desk()),
            "tiny" => Ok(Settings::tiny()),
            "paper" => Ok(Settings::paper()),
            _ => Err(Error::Usage(format!(
                "unknown preset {name:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ood.validate()?;
        self.ind.validate()?;
        self.train.validate()?;
        self.cont.validate()?;
        if self.lrs.is_empty() || self.lrs.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Invalid("continue.lrs must be positive rates".into()));
        }
        SweepPlan {
            sigmas: self.sigmas.clone(),
            trials: self.trials,
            seed: 0,
            jobs: 1,
        }
        .validate()?;
        if self.beam == 0 {
            return Err(Error::Invalid("beam must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies a settings file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Format(format!("settings line {}: {m}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["data", "model", "train", "continue", "analysis"].contains(&section.as_str()) {
                    return Err(at(format!("unknown section [{section}]")));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            self.set(&section, k.trim(), v.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    /// Sets one `section.key`.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let bad = || Error::Format(format!("bad value {v:?} for {section}.{key}"));
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let real = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let list = |v: &str| {
            v.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()
        };
        let both = |s: &mut Settings, f: &dyn Fn(&mut DomainSpec)| {
            f(&mut s.ood);
            f(&mut s.ind);
        };
        match (section, key) {
            ("data", "core_vocab") => {
                let n = num(v)?;
                both(self, &|d| d.core_vocab = n);
            }
            ("data", "ood_exclusive_vocab") => self.ood.exclusive_vocab = num(v)?,
            ("data", "ind_exclusive_vocab") => self.ind.exclusive_vocab = num(v)?,
            ("data", "min_len") => {
                let n = num(v)?;
                both(self, &|d| d.min_len = n);
            }
            ("data", "max_len") => {
                let n = num(v)?;
                both(self, &|d| d.max_len = n);
            }
            ("data", "templates") => {
                let n = num(v)?;
                both(self, &|d| d.templates = n);
            }
            ("data", "reorder_window") => {
                let n = num(v)?;
                both(self, &|d| d.reorder_window = n);
            }
            ("data", "max_syllables") => {
                let n = num(v)?;
                both(self, &|d| d.max_syllables = n);
            }
            ("data", "zipf") => {
                let z = real(v)?;
                both(self, &|d| d.zipf = z);
            }
            ("data", "ood_template_set") => self.ood.template_set = num(v)? as u64,
            ("data", "ind_template_set") => self.ind.template_set = num(v)? as u64,
            ("data", "ood_remap_seed") => self.ood.remap_seed = num(v)? as u64,
            ("data", "ind_remap_seed") => self.ind.remap_seed = num(v)? as u64,
            ("data", "ood_train") => self.sizes.ood_train = num(v)?,
            ("data", "ood_dev") => self.sizes.ood_dev = num(v)?,
            ("data", "ood_test") => self.sizes.ood_test = num(v)?,
            ("data", "ind_train") => self.sizes.ind_train = num(v)?,
            ("data", "ind_dev") => self.sizes.ind_dev = num(v)?,
            ("data", "ind_test") => self.sizes.ind_test = num(v)?,
            ("data", "bpe_vocab") => self.bpe_vocab = num(v)?,
            ("model", "embed_dim") => self.model.embed_dim = num(v)?,
            ("model", "hidden_dim") => self.model.hidden_dim = num(v)?,
            ("model", "encoder_layers") => self.model.encoder_layers = num(v)?,
            ("model", "decoder_layers") => self.model.decoder_layers = num(v)?,
            ("model", "decoder_init") => self.model.decoder_init = DecoderInit::parse(v)?,
            ("model", "init_scale") => self.model.init_scale = real(v)?,
            ("continue", "lrs") => self.lrs = list(v)?,
            ("continue", "lr") => self.lrs = vec![real(v)?],
            ("train", k) => set_train(&mut self.train, k, v)?,
            ("continue", k) => set_train(&mut self.cont, k, v)?,
            ("analysis", "sigmas") => self.sigmas = list(v)?,
            ("analysis", "trials") => self.trials = num(v)?,
            ("analysis", "beam") => self.beam = num(v)?,
            _ => return Err(Error::Format(format!("unknown setting {section}.{key}"))),
        }
        Ok(())
    }

    /// Canonical settings file; [`Settings::apply_text`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (o, i, z) = (&self.ood, &self.ind, &self.sizes);
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "[data]");
        for (k, v) in [
            ("core_vocab", o.core_vocab.to_string()),
            ("ood_exclusive_vocab", o.exclusive_vocab.to_string()),
            ("ind_exclusive_vocab", i.exclusive_vocab.to_string()),
            ("min_len", o.min_len.to_string()),
            ("max_len", o.max_len.to_string()),
            ("templates", o.templates.to_string()),
            ("reorder_window", o.reorder_window.to_string()),
            ("max_syllables", o.max_syllables.to_string()),
            ("zipf", o.zipf.to_string()),
            ("ood_template_set", o.template_set.to_string()),
            ("ind_template_set", i.template_set.to_string()),
            ("ood_remap_seed", o.remap_seed.to_string()),
            ("ind_remap_seed", i.remap_seed.to_string()),
            ("ood_train", z.ood_train.to_string()),
            ("ood_dev", z.ood_dev.to_string()),
            ("ood_test", z.ood_test.to_string()),
            ("ind_train", z.ind_train.to_string()),
            ("ind_dev", z.ind_dev.to_string()),
            ("ind_test", z.ind_test.to_string()),
            ("bpe_vocab", self.bpe_vocab.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let m = &self.model;
        let _ = writeln!(s, "\n[model]");
        for (k, v) in [
            ("embed_dim", m.embed_dim.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("encoder_layers", m.encoder_layers.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("decoder_init", m.decoder_init.name().to_string()),
            ("init_scale", m.init_scale.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[train]");
        s.push_str(&train_text(&self.train, true));
        let _ = writeln!(s, "\n[continue]");
        let _ = writeln!(s, "lrs = {}", join(&self.lrs));
        s.push_str(&train_text(&self.cont, false));
        let _ = writeln!(s, "\n[analysis]");
        let _ = writeln!(s, "sigmas = {}", join(&self.sigmas));
        let _ = writeln!(s, "trials = {}", self.trials);
        let _ = writeln!(s, "beam = {}", self.beam);
        s
    }
}

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    let bad = || Error::Format(format!("bad value {v:?} for {key}"));
    let num = || v.parse::<usize>().map_err(|_| bad());
    let real = || v.parse::<f64>().map_err(|_| bad());
    match key {
        "lr" => t.lr = real()?,
        "lr_reduce" => t.lr_reduce = real()?,
        "batch_size" => t.batch_size = num()?,
        "checkpoint_interval" => {
            t.checkpoint_interval = if v == "half-epoch" { None } else { Some(num()?) }
        }
        "patience" => t.patience = num()?,
        "stop_patience" => t.stop_patience = num()?,
        "max_checkpoints" => t.max_checkpoints = num()?,
        "dropout" => t.dropout = real()?,
        "label_smoothing" => t.label_smoothing = real()?,
        "clip_norm" => t.clip_norm = real()?,
        "reset_optimizer" => t.reset_optimizer = v.parse().map_err(|_| bad())?,
        _ => return Err(Error::Format(format!("unknown training setting {key}"))),
    }
    Ok(())
}

fn train_text(t: &TrainConfig, with_lr: bool) -> String {
    t.to_kv("x")
        .lines()
        .filter_map(|l| l.strip_prefix("x."))
        .filter(|l| !l.starts_with("seed=") && (with_lr || !l.starts_with("lr=")))
        .map(|l| {
            let (k, v) = l.split_once('=').expect("key=value");
            format!("{k} = {v}\n")
        })
        .collect()
}

/// Reads a settings file over a preset.
pub fn load_settings(preset: &str, path: Option<&Path>) -> Result<Settings> {
    let mut s = Settings::preset(preset)?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        s.apply_text(&text)?;
    }
    s.validate()?;
    Ok(s)
}

/// Generates the corpora of one seed.
pub fn generate(settings: &Settings, seed: u64) -> Result<DomainPair> {
    generate_domain_pair(seed, &settings.ood, &settings.ind, &settings.sizes)
}

/// SHA-256 of every corpus file, keyed `corpus.<name>.<side>`.
pub fn corpus_hashes(data_dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (name, _) in CORPUS_FILES {
        for side in ["src", "tgt"] {
            let p = data_dir.join(format!("{name}.{side}"));
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            out.insert(format!("corpus.{name}.{side}"), sha256_hex(&bytes));
        }
    }
    Ok(out)
}

/// Hash of the out-of-domain training text a codec and model were built from.
pub fn training_data_hash(pair: &DomainPair) -> String {
    let mut text = String::new();
    for (s, t) in pair.ood.train.src.iter().zip(&pair.ood.train.tgt) {
        let _ = writeln!(text, "{}\t{}", s.join(" "), t.join(" "));
    }
    sha256_hex(text.as_bytes())
}

/// Builds the codec, initialises a model and trains it out of domain.
pub fn train_ood(settings: &Settings, pair: &DomainPair, seed: u64) -> Result<(Codec, TrainOutcome)> {
    let codec = Codec::train(&pair.ood.train, settings.bpe_vocab)?;
    let config = ModelConfig {
        src_vocab: codec.src_vocab.len(),
        tgt_vocab: codec.tgt_vocab.len(),
        ..settings.model.clone()
    };
    let store = build_model(&config, &mut SeededRng::new(seed).derive("init"))?;
    let mut start = Checkpoint::new(config, store);
    start.meta.extend(codec.to_meta());
    start.meta.insert("data.ood_train_sha256".into(), training_data_hash(pair));
    start.meta.insert("seed".into(), seed.to_string());
    let tc = TrainConfig {
        seed,
        ..settings.train.clone()
    };
    let out = train(&start, &codec.encode(&pair.ood.train), &codec.encode(&pair.ood.dev), &tc, &FreezeSpec::None)?;
    Ok((codec, out))
}

/// Continued training of one regime: a single run or a learning-rate sweep.
pub struct Continued {
    pub outcome: TrainOutcome,
    /// `lr\tdev_ppl\tselected` table when a sweep ran.
    pub sweep_tsv: Option<String>,
}

pub fn continue_regime(
    settings: &Settings,
    ood: &Checkpoint,
    codec: &Codec,
    pair: &DomainPair,
    freeze: &FreezeSpec,
    seed: u64,
    jobs: usize,
) -> Result<Continued> {
    let (corpus, dev) = (codec.encode(&pair.ind.train), codec.encode(&pair.ind.dev));
    let base = TrainConfig {
        seed,
        ..settings.cont.clone()
    };
    if let [lr] = settings.lrs[..] {
        let cfg = TrainConfig { lr, ..base };
        return Ok(Continued {
            outcome: continued_training(ood, &corpus, &dev, &cfg, freeze)?,
            sweep_tsv: None,
        });
    }
    let sweep = lr_sweep(ood, &corpus, &dev, &base, freeze, &settings.lrs, jobs)?;
    let tsv = sweep.tsv();
    Ok(Continued {
        outcome: sweep.best,
        sweep_tsv: Some(tsv),
    })
}

fn bleu_of(ck: &Checkpoint, codec: &Codec, src: &[Vec<String>], refs: &[Vec<String>], beam: usize) -> Result<f64> {
    let model = Seq2Seq::new(&ck.config, &ck.store)?;
    corpus_bleu(&model, &ck.store, codec, src, refs, beam)
}

/// Numbers behind every report of one experiment.
#[derive(Clone, Debug)]
pub struct Summary {
    pub seed: u64,
    /// BLEU of the out-of-domain model on the out-of-domain test set.
    pub ood_test_bleu: f64,
    /// BLEU of the out-of-domain model on the in-domain test set.
    pub unadapted_bleu: f64,
    pub ood_initial_loss: f64,
    /// Training loss at the last logged out-of-domain checkpoint.
    pub ood_final_loss: f64,
    /// In-domain test BLEU per regime, in [`FreezeSpec::study`] order.
    pub regimes: Vec<(FreezeSpec, f64)>,
    /// Movement of every component per regime, same order.
    pub rms: Vec<(FreezeSpec, RmsReport)>,
    pub curves: Vec<SensitivityCurve>,
    pub table5: Table5,
}

impl Summary {
    pub fn bleu(&self, spec: &FreezeSpec) -> Option<f64> {
        self.regimes.iter().find(|r| &r.0 == spec).map(|r| r.1)
    }

    pub fn rms(&self, spec: &FreezeSpec) -> Option<&RmsReport> {
        self.rms.iter().find(|r| &r.0 == spec).map(|r| &r.1)
    }

    /// Full continued training minus the unadapted model.
    pub fn full_gain(&self) -> f64 {
        self.bleu(&FreezeSpec::None).unwrap_or(f64::NAN) - self.unadapted_bleu
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Report files written at the top of an experiment directory.
pub const REPORTS: [&str; 7] = [
    "fig2.tsv",
    "table3.tsv",
    "table4.tsv",
    "fig3_raw.tsv",
    "fig3.tsv",
    "table5.tsv",
    "manifest",
];

/// Runs the whole study for one seed and writes it under `dir`:
/// `data/`, `ood.ckpt`, `continue/<regime>.ckpt`, `bleu/<name>.tsv`,
/// training logs and the files in [`REPORTS`].
pub fn run_experiment(dir: &Path, settings: &Settings, seed: u64, jobs: usize, command: &str) -> Result<Summary> {
    settings.validate()?;
    let pair = generate(settings, seed)?;
    let data_dir = dir.join("data");
    write_domain_pair(&data_dir, &pair)?;

    let (codec, ood_run) = train_ood(settings, &pair, seed)?;
    let ood = ood_run.best.clone();
    ood.save(&dir.join("ood.ckpt"))?;
    write(&dir.join("ood.log.tsv"), &log_tsv(&ood_run.log))?;
    write(&dir.join("bpe/src.bpe"), &codec.src_bpe.to_text())?;
    write(&dir.join("bpe/tgt.bpe"), &codec.tgt_bpe.to_text())?;

    let (ind, oodt) = (&pair.ind.test, &pair.ood.test);
    let unadapted = bleu_of(&ood, &codec, &ind.src, &ind.tgt, settings.beam)?;
    let ood_test_bleu = bleu_of(&ood, &codec, &oodt.src, &oodt.tgt, settings.beam)?;
    write(&dir.join("bleu/unadapted.tsv"), &metric_row(unadapted, "bleu", "ind.test"))?;
    write(&dir.join("bleu/ood-test.tsv"), &metric_row(ood_test_bleu, "bleu", "ood.test"))?;

    let mut regimes = Vec::new();
    let mut rms = Vec::new();
    for spec in FreezeSpec::study() {
        let name = spec.name();
        let run = continue_regime(settings, &ood, &codec, &pair, &spec, seed, jobs)?;
        let ck = &run.outcome.best;
        ck.save(&dir.join(format!("continue/{name}.ckpt")))?;
        write(&dir.join(format!("continue/{name}.log.tsv")), &log_tsv(&run.outcome.log))?;
        if let Some(t) = &run.sweep_tsv {
            write(&dir.join(format!("continue/{name}.sweep.tsv")), t)?;
        }
        let b = bleu_of(ck, &codec, &ind.src, &ind.tgt, settings.beam)?;
        write(&dir.join(format!("bleu/{name}.tsv")), &metric_row(b, "bleu", "ind.test"))?;
        let report = RmsReport::between(&ood.store, &ck.store)?;
        write(&dir.join(format!("rms/{name}.tsv")), &report.tsv())?;
        regimes.push((spec.clone(), b));
        rms.push((spec, report));
    }
    write(&dir.join("fig2.tsv"), &report(dir)?)?;

    let full = rms[0].1.clone();
    write(&dir.join("table3.tsv"), &full.tsv())?;
    let individual = RmsReport {
        rows: Component::ALL
            .iter()
            .map(|&c| {
                let r = &rms.iter().find(|r| r.0 == FreezeSpec::FreezeAllBut(c)).expect("study covers c").1;
                (c, r.get(c).expect("every component measured"))
            })
            .collect(),
    };
    write(&dir.join("table4.tsv"), &individual.tsv())?;

    let model = Seq2Seq::new(&ood.config, &ood.store)?;
    let plan = SweepPlan {
        sigmas: settings.sigmas.clone(),
        trials: settings.trials,
        seed,
        jobs,
    };
    let eval = EvalSet {
        name: "ood.test",
        src: &oodt.src,
        refs: &oodt.tgt,
    };
    let curves = Component::ALL
        .iter()
        .map(|&c| sensitivity_sweep(&model, &ood.store, &codec, c, &plan, eval))
        .collect::<Result<Vec<_>>>()?;
    write(&dir.join("fig3_raw.tsv"), &sensitivity_raw_tsv(&curves))?;
    write(&dir.join("fig3.tsv"), &sensitivity_tsv(&curves))?;
    let table5 = build_table5(&full, &curves)?;
    write(&dir.join("table5.tsv"), &table5.tsv())?;

    let mut manifest = BTreeMap::new();
    manifest.insert("command".to_string(), command.to_string());
    manifest.insert("seed".into(), seed.to_string());
    manifest.insert("rng".into(), RNG_ALGORITHM.into());
    manifest.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    manifest.insert("ood.config_hash".into(), ood.config_hash());
    manifest.extend(corpus_hashes(&data_dir)?);
    write_manifest(&dir.join("manifest"), &manifest, settings)?;

    Ok(Summary {
        seed,
        ood_test_bleu,
        unadapted_bleu: unadapted,
        ood_initial_loss: ood_run.initial_loss,
        ood_final_loss: ood_run.log.last().map_or(f64::NAN, |r| r.train_loss),
        regimes,
        rms,
        curves,
        table5,
    })
}

/// `key=value` lines followed by the settings as `settings.<section>.<key>`.
pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>, settings: &Settings) -> Result<()> {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k}={v}");
    }
    let mut section = "";
    let text = settings.to_text();
    for line in text.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name;
        } else if let Some((k, v)) = line.split_once(" = ") {
            let _ = writeln!(s, "settings.{section}.{k}={v}");
        }
    }
    write(path, &s)
}

/// Reads a `score\tmetric\tdataset` file.
pub fn read_metric(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split('\t')
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: expected score\\tmetric\\tdataset", path.display())))
}

/// Consolidated BLEU table of an experiment directory.
///
/// Reads `bleu/unadapted.tsv` and `bleu/none.tsv` (the two baselines) and
/// any other `bleu/<regime>.tsv` whose name is a freeze regime. When
/// `bleu/ood-test.tsv` exists, the OOD model's score on its own test set is
/// listed as a reference row. Baseline and reference rows leave the delta
/// column empty; every regime row reports BLEU minus full
/// continued training.
pub fn report(dir: &Path) -> Result<String> {
    let bleu_dir = dir.join("bleu");
    let unadapted = read_metric(&bleu_dir.join("unadapted.tsv"))?;
    let full = read_metric(&bleu_dir.join("none.tsv"))?;
    let mut found: Vec<(FreezeSpec, PathBuf)> = Vec::new();
    let entries = fs::read_dir(&bleu_dir).map_err(|e| Error::io(&bleu_dir, e))?;
    for e in entries {
        let path = e.map_err(|e| Error::io(&bleu_dir, e))?.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if path.extension().and_then(|s| s.to_str()) != Some("tsv") || stem == "none" {
            continue;
        }
        if let Ok(spec) = FreezeSpec::parse(stem) {
            found.push((spec, path));
        }
    }
    let study = FreezeSpec::study();
    let rank = |s: &FreezeSpec| study.iter().position(|x| x == s).unwrap_or(study.len());
    found.sort_by(|a, b| rank(&a.0).cmp(&rank(&b.0)).then_with(|| a.0.name().cmp(&b.0.name())));

    let mut s = String::from("regime\tbleu\tdelta_vs_full\n");
    let _ = writeln!(s, "baseline-unadapted\t{unadapted:.4}\t");
    let _ = writeln!(s, "baseline-full\t{full:.4}\t");
    let ood_test = bleu_dir.join("ood-test.tsv");
    if ood_test.exists() {
        let _ = writeln!(s, "reference-ood-test\t{:.4}\t", read_metric(&ood_test)?);
    }
    for (spec, path) in found {
        let b = read_metric(&path)?;
        let _ = writeln!(s, "{}\t{b:.4}\t{:+.4}", spec.name(), b - full);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_text_round_trips() {
        for name in PRESETS {
            let s = Settings::preset(name).unwrap();
            let mut back = Settings::preset("desk").unwrap();
            back.apply_text(&s.to_text()).unwrap();
            assert_eq!(back, s, "{name}");
        }
    }

    #[test]
    fn settings_errors_name_the_line() {
        let mut s = Settings::desk();
        let e = s.apply_text("[model]\nembed_dim = 8\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        assert_eq!(s.model.embed_dim, 8);
        assert!(s.apply_text("[nope]\n").is_err());
        assert!(s.apply_text("[train]\nlr 3\n").is_err());
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            Settings::preset(name).unwrap().validate().unwrap();
        }
        assert!(Settings::preset("huge").is_err());
    }
}
