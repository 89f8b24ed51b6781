//! Training, continued training with freeze masks, and the learning-rate sweep.

mod adam;
mod checkpoint;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;

pub use adam::{clip_gradients, Adam};
pub use checkpoint::{sha256_hex, Checkpoint, MAGIC, VERSION};

use crate::data::TokenCorpus;
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{Component, Dropout, ParameterStore, Seq2Seq};
use crate::nn::{Graph, SeededRng};

/// Which components are excluded from updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FreezeSpec {
    None,
    Freeze(BTreeSet<Component>),
    FreezeAllBut(Component),
}

impl FreezeSpec {
    pub fn freeze_one(c: Component) -> Self {
        FreezeSpec::Freeze(BTreeSet::from([c]))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FreezeSpec::Freeze(set) if set.is_empty() => {
                Err(Error::Invalid("freeze set must not be empty".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_trainable(&self, c: Component) -> bool {
        match self {
            FreezeSpec::None => true,
            FreezeSpec::Freeze(set) => !set.contains(&c),
            FreezeSpec::FreezeAllBut(keep) => *keep == c,
        }
    }

    /// `none`, `freeze-<c>[+<c>...]` or `freeze-all-but-<c>`.
    pub fn name(&self) -> String {
        match self {
            FreezeSpec::None => "none".into(),
            FreezeSpec::Freeze(set) => {
                let names: Vec<&str> = set.iter().map(|c| c.name()).collect();
                format!("freeze-{}", names.join("+"))
            }
            FreezeSpec::FreezeAllBut(c) => format!("freeze-all-but-{c}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(FreezeSpec::None);
        }
        if let Some(c) = s.strip_prefix("freeze-all-but-") {
            return Ok(FreezeSpec::FreezeAllBut(c.parse()?));
        }
        if let Some(list) = s.strip_prefix("freeze-") {
            let set = list.split('+').map(str::parse).collect::<Result<BTreeSet<_>>>()?;
            let spec = FreezeSpec::Freeze(set);
            spec.validate()?;
            return Ok(spec);
        }
        Err(Error::Usage(format!("unknown freeze regime {s:?}")))
    }

    /// The eleven regimes of the continued-training study: no freezing, then
    /// each component frozen alone, then each component trained alone.
    pub fn study() -> Vec<FreezeSpec> {
        let mut v = vec![FreezeSpec::None];
        v.extend(Component::ALL.iter().map(|&c| FreezeSpec::freeze_one(c)));
        v.extend(Component::ALL.iter().map(|&c| FreezeSpec::FreezeAllBut(c)));
        v
    }
}

/// Sets every parameter's `trainable` flag from `spec`.
pub fn apply_freeze(store: &mut ParameterStore, spec: &FreezeSpec) -> Result<()> {
    spec.validate()?;
    for p in store.iter_mut() {
        p.trainable = spec.is_trainable(p.component);
    }
    Ok(())
}

/// Optimisation settings of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_reduce: f64,
    /// Sentences per batch.
    pub batch_size: usize,
    /// Batches between checkpoints; `None` means every half epoch.
    pub checkpoint_interval: Option<usize>,
    /// Checkpoints without a new best dev perplexity before the rate is reduced.
    pub patience: usize,
    /// Checkpoints without a new best dev perplexity before training stops.
    pub stop_patience: usize,
    pub max_checkpoints: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Start continued training from fresh Adam moments.
    pub reset_optimizer: bool,
}

impl TrainConfig {
    /// Out-of-domain training at desk scale.
    pub fn ood_desk() -> Self {
        TrainConfig {
            lr: 0.01,
            lr_reduce: 0.7,
            batch_size: 32,
            checkpoint_interval: None,
            patience: 2,
            stop_patience: 5,
            max_checkpoints: 30,
            dropout: 0.1,
            label_smoothing: 0.1,
            clip_norm: 5.0,
            seed: 1,
            reset_optimizer: true,
        }
    }

    /// Continued training: no dropout or label smoothing, halving on plateaus.
    pub fn continued_desk() -> Self {
        TrainConfig {
            lr: 0.001,
            lr_reduce: 0.5,
            max_checkpoints: 20,
            dropout: 0.0,
            label_smoothing: 0.0,
            ..TrainConfig::ood_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(self.lr_reduce > 0.0 && self.lr_reduce < 1.0) {
            return bad(format!("reduce factor {} must lie in (0, 1)", self.lr_reduce));
        }
        if self.batch_size == 0 || self.checkpoint_interval == Some(0) {
            return bad("batch size and checkpoint interval must be positive".into());
        }
        if self.patience == 0 || self.stop_patience == 0 || self.max_checkpoints == 0 {
            return bad("patience values and max checkpoints must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("dropout and label smoothing must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Canonical `train.*` lines.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        let interval = self.checkpoint_interval.map_or("half-epoch".to_string(), |i| i.to_string());
        for (k, v) in [
            ("lr", self.lr.to_string()),
            ("lr_reduce", self.lr_reduce.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("checkpoint_interval", interval),
            ("patience", self.patience.to_string()),
            ("stop_patience", self.stop_patience.to_string()),
            ("max_checkpoints", self.max_checkpoints.to_string()),
            ("dropout", self.dropout.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("reset_optimizer", self.reset_optimizer.to_string()),
        ] {
            let _ = writeln!(s, "{prefix}.{k}={v}");
        }
        s
    }
}

/// Plateau bookkeeping shared by training and [`lr_plateau_schedule`].
#[derive(Clone, Debug)]
pub struct Plateau {
    patience: usize,
    best: f64,
    since_best: usize,
    since_reduce: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlateauEvent {
    pub improved: bool,
    pub reduce: bool,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Plateau {
            patience,
            best: f64::INFINITY,
            since_best: 0,
            since_reduce: 0,
        }
    }

    pub fn observe(&mut self, ppl: f64) -> PlateauEvent {
        if ppl < self.best {
            self.best = ppl;
            self.since_best = 0;
            self.since_reduce = 0;
            return PlateauEvent {
                improved: true,
                reduce: false,
            };
        }
        self.since_best += 1;
        self.since_reduce += 1;
        let reduce = self.since_reduce >= self.patience;
        if reduce {
            self.since_reduce = 0;
        }
        PlateauEvent {
            improved: false,
            reduce,
        }
    }

    pub fn since_best(&self) -> usize {
        self.since_best
    }
}

/// 1-based checkpoint indices at which the learning rate is multiplied by
/// the reduce factor, for a given dev-perplexity history.
pub fn lr_plateau_schedule(history: &[f64], patience: usize) -> Vec<usize> {
    let mut p = Plateau::new(patience.max(1));
    history
        .iter()
        .enumerate()
        .filter_map(|(i, &ppl)| p.observe(ppl).reduce.then_some(i + 1))
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub checkpoint: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_ppl: f64,
    pub is_best: bool,
}

pub fn log_tsv(rows: &[LogRow]) -> String {
    let mut s = String::from("checkpoint\tlr\ttrain_loss\tdev_ppl\tis_best\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{}",
            r.checkpoint,
            r.lr,
            r.train_loss,
            r.dev_ppl,
            u8::from(r.is_best)
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest-dev-perplexity checkpoint.
    pub best: Checkpoint,
    pub log: Vec<LogRow>,
    /// Mean loss of the first batch.
    pub initial_loss: f64,
    pub steps: usize,
}

/// Shuffles, groups sentences of similar source length and cuts batches.
fn make_batches(corpus: &TokenCorpus, size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut idx);
    let mut batches = Vec::new();
    for pool in idx.chunks(size * 16) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| (corpus.src[i].len(), corpus.tgt[i].len()));
        batches.extend(pool.chunks(size).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

/// Trains from `start` until the dev perplexity stops improving.
///
/// Uses `start.optimizer` unless it is absent or `config.reset_optimizer` is
/// set. Frozen components (per `freeze`) are never updated.
pub fn train(
    start: &Checkpoint,
    corpus: &TokenCorpus,
    dev: &TokenCorpus,
    config: &TrainConfig,
    freeze: &FreezeSpec,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() || dev.is_empty() {
        return Err(Error::Invalid("training and dev corpora must be non-empty".into()));
    }
    let model = Seq2Seq::new(&start.config, &start.store)?;
    let mut store = start.store.clone();
    apply_freeze(&mut store, freeze)?;
    let mut adam = match (&start.optimizer, config.reset_optimizer) {
        (Some(a), false) => {
            a.check_layout(&store)?;
            a.clone()
        }
        _ => Adam::new(&store),
    };
    let root = SeededRng::new(config.seed);
    let mut order_rng = root.derive("batch-order");
    let mut dropout = Dropout::new(config.dropout, root.derive("dropout"));
    let n_batches = corpus.len().div_ceil(config.batch_size);
    let interval = config.checkpoint_interval.unwrap_or(n_batches.div_ceil(2).max(1));

    let mut lr = config.lr;
    let mut plateau = Plateau::new(config.patience);
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut initial_loss = f64::NAN;
    let (mut loss_sum, mut tok_sum, mut steps) = (0.0, 0usize, 0usize);
    let mut g = Graph::new();

    'outer: loop {
        for idx in make_batches(corpus, config.batch_size, &mut order_rng) {
            let batch = corpus.batch(&idx);
            g.reset();
            let drop = (config.dropout > 0.0).then_some(&mut dropout);
            let (loss, count) = model.forward_loss(&mut g, &store, &batch, config.label_smoothing, true, drop)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("loss {value} at step {}", steps + 1)));
            }
            if steps == 0 {
                initial_loss = value;
            }
            store.zero_grad();
            g.backward(loss, &mut store)?;
            if config.clip_norm > 0.0 {
                clip_gradients(&mut store, config.clip_norm);
            }
            adam.step(&mut store, lr).map_err(|e| Error::Divergence(e.to_string()))?;
            loss_sum += value * count as f64;
            tok_sum += count;
            steps += 1;

            if steps % interval != 0 {
                continue;
            }
            let dev_ppl = perplexity(&model, &store, dev)?;
            if !dev_ppl.is_finite() {
                return Err(Error::Divergence(format!("dev perplexity {dev_ppl}")));
            }
            let index = log.len() + 1;
            let event = plateau.observe(dev_ppl);
            log.push(LogRow {
                checkpoint: index,
                lr,
                train_loss: loss_sum / tok_sum.max(1) as f64,
                dev_ppl,
                is_best: event.improved,
            });
            (loss_sum, tok_sum) = (0.0, 0);
            if event.improved {
                let mut ck = Checkpoint::new(start.config.clone(), store.clone());
                ck.optimizer = Some(adam.clone());
                ck.index = index;
                ck.dev_ppl = dev_ppl;
                ck.rng_state = order_rng.state();
                ck.meta = start.meta.clone();
                best = Some(ck);
            }
            if event.reduce {
                lr *= config.lr_reduce;
            }
            if plateau.since_best() >= config.stop_patience || index >= config.max_checkpoints {
                break 'outer;
            }
        }
    }
    let best = best.expect("the first checkpoint always improves on infinity");
    Ok(TrainOutcome {
        best,
        log,
        initial_loss,
        steps,
    })
}

/// Continued training from an out-of-domain checkpoint: copies its
/// parameters, then trains on in-domain data with dropout and label
/// smoothing disabled.
pub fn continued_training(
    ood: &Checkpoint,
    corpus: &TokenCorpus,
    dev: &TokenCorpus,
    base: &TrainConfig,
    freeze: &FreezeSpec,
) -> Result<TrainOutcome> {
    let config = TrainConfig {
        dropout: 0.0,
        label_smoothing: 0.0,
        ..base.clone()
    };
    let mut start = ood.clone();
    start.meta.insert("continue.freeze".into(), freeze.name());
    start.meta.insert("continue.lr".into(), config.lr.to_string());
    train(&start, corpus, dev, &config, freeze)
}

/// Learning rates tried by default.
pub const SWEEP_LRS: [f64; 5] = [0.1, 0.01, 0.001, 0.0001, 0.00001];

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub lr: f64,
    /// Best dev perplexity of the run; infinite if it diverged.
    pub dev_ppl: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub best_lr: f64,
    pub best: TrainOutcome,
}

impl SweepResult {
    pub fn tsv(&self) -> String {
        let mut s = String::from("lr\tdev_ppl\tselected\n");
        for r in &self.runs {
            let _ = writeln!(s, "{}\t{:.6}\t{}", r.lr, r.dev_ppl, u8::from(r.lr == self.best_lr));
        }
        s
    }
}

/// Runs continued training once per learning rate (up to `jobs` at a time)
/// and keeps the run with the lowest dev perplexity; ties go to the smaller
/// rate. Diverged runs are recorded with infinite perplexity.
pub fn lr_sweep(
    ood: &Checkpoint,
    corpus: &TokenCorpus,
    dev: &TokenCorpus,
    base: &TrainConfig,
    freeze: &FreezeSpec,
    lrs: &[f64],
    jobs: usize,
) -> Result<SweepResult> {
    if lrs.is_empty() {
        return Err(Error::Invalid("learning-rate sweep needs at least one rate".into()));
    }
    let run = |&lr: &f64| {
        let cfg = TrainConfig { lr, ..base.clone() };
        match continued_training(ood, corpus, dev, &cfg, freeze) {
            Ok(o) => Ok((lr, Some(o))),
            Err(Error::Divergence(_) | Error::NonFinite(_)) => Ok((lr, None)),
            Err(e) => Err(e),
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let results: Vec<(f64, Option<TrainOutcome>)> =
        pool.install(|| lrs.par_iter().map(run).collect::<Result<Vec<_>>>())?;

    let runs: Vec<SweepRun> = results
        .iter()
        .map(|(lr, o)| SweepRun {
            lr: *lr,
            dev_ppl: o.as_ref().map_or(f64::INFINITY, |o| o.best.dev_ppl),
        })
        .collect();
    let (best_lr, best) = results
        .into_iter()
        .filter_map(|(lr, o)| o.map(|o| (lr, o)))
        .min_by(|a, b| {
            a.1.best
                .dev_ppl
                .total_cmp(&b.1.best.dev_ppl)
                .then(a.0.total_cmp(&b.0))
        })
        .ok_or_else(|| Error::Divergence("every learning rate diverged".into()))?;
    Ok(SweepResult { runs, best_lr, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_walk_through() {
        assert!(lr_plateau_schedule(&[5.0, 4.0, 3.0, 2.0], 2).is_empty());
        assert_eq!(lr_plateau_schedule(&[3.0; 7], 2), vec![3, 5, 7]);
        assert_eq!(lr_plateau_schedule(&[3.0, 2.0, 2.5, 2.5, 1.0, 1.5], 2), vec![4]);
    }

    #[test]
    fn freeze_names_round_trip() {
        for spec in FreezeSpec::study() {
            assert_eq!(FreezeSpec::parse(&spec.name()).unwrap(), spec);
        }
        let two = FreezeSpec::Freeze(BTreeSet::from([Component::Encoder, Component::Softmax]));
        assert_eq!(FreezeSpec::parse(&two.name()).unwrap(), two);
        assert!(FreezeSpec::Freeze(BTreeSet::new()).validate().is_err());
        assert!(FreezeSpec::parse("freeze-").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::ood_desk();
        assert!(c.validate().is_ok());
        c.lr_reduce = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig::ood_desk();
        c.lr = 0.0;
        assert!(c.validate().is_err());
    }
}
