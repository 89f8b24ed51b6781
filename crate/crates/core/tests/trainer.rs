//! Freezing, optimiser, loss and checkpoint behaviour of the trainer.

use std::fs;

use freezelab::data::TokenCorpus;
use freezelab::model::{build_model, ModelConfig, ParameterStore};
use freezelab::nn::{Graph, SeededRng, Tensor};
use freezelab::trainer::{
    clip_gradients, continued_training, log_tsv, lr_sweep, Adam, Checkpoint, FreezeSpec, TrainConfig, TrainOutcome,
};
use freezelab::{Component, Error};
use proptest::prelude::*;

fn toy_corpus(seed: u64, n: usize) -> TokenCorpus {
    // Target = source shifted by one id, so there is something to learn.
    let mut rng = SeededRng::new(seed);
    let mut c = TokenCorpus::default();
    for _ in 0..n {
        let s: Vec<usize> = (0..2 + rng.below(4)).map(|_| 4 + rng.below(6)).collect();
        c.tgt.push(s.iter().map(|&x| 4 + (x - 3) % 6).collect());
        c.src.push(s);
    }
    c
}

fn start() -> Checkpoint {
    let mut cfg = ModelConfig::desk(10, 10);
    cfg.embed_dim = 6;
    cfg.hidden_dim = 6;
    let store = build_model(&cfg, &mut SeededRng::new(31)).unwrap();
    Checkpoint::new(cfg, store)
}

/// 200 updates, keeping the last checkpoint as the best one.
fn config(lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: 4,
        checkpoint_interval: Some(50),
        max_checkpoints: 4,
        stop_patience: 10,
        ..TrainConfig::continued_desk()
    }
}

fn run(spec: &FreezeSpec) -> TrainOutcome {
    let out = continued_training(&start(), &toy_corpus(1, 60), &toy_corpus(2, 8), &config(0.01), spec).unwrap();
    assert_eq!(out.steps, 200);
    out
}

fn tensor_changed(a: &ParameterStore, b: &ParameterStore, name: &str) -> bool {
    !a.by_name(name).unwrap().value.bits_eq(&b.by_name(name).unwrap().value)
}

fn frozen_moments_are_zero(out: &TrainOutcome) {
    let adam = out.best.optimizer.as_ref().unwrap();
    for (id, p) in out.best.store.iter() {
        if !p.trainable {
            assert!(adam.m[id.0].data().iter().chain(adam.v[id.0].data()).all(|&x| x == 0.0), "{}", p.name);
        }
    }
}

#[test]
fn frozen_component_stays_bit_identical() {
    let before = start().store;
    for c in Component::ALL {
        let out = run(&FreezeSpec::freeze_one(c));
        for (_, p) in before.iter() {
            let changed = tensor_changed(&before, &out.best.store, &p.name);
            assert_eq!(changed, p.component != c, "freeze {c}: {}", p.name);
        }
        frozen_moments_are_zero(&out);
    }
}

#[test]
fn only_the_kept_component_moves() {
    let before = start().store;
    for c in Component::ALL {
        let out = run(&FreezeSpec::FreezeAllBut(c));
        for (_, p) in before.iter() {
            let changed = tensor_changed(&before, &out.best.store, &p.name);
            assert_eq!(changed, p.component == c, "keep {c}: {}", p.name);
        }
        frozen_moments_are_zero(&out);
    }
}

#[test]
fn training_is_reproducible() {
    let a = run(&FreezeSpec::None);
    let b = run(&FreezeSpec::None);
    assert_eq!(log_tsv(&a.log), log_tsv(&b.log));
    assert!(a.best.store.values_bits_eq(&b.best.store));
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
}

#[test]
fn single_rate_sweep_equals_plain_run() {
    let (corpus, dev) = (toy_corpus(1, 60), toy_corpus(2, 8));
    let spec = FreezeSpec::freeze_one(Component::Encoder);
    let plain = continued_training(&start(), &corpus, &dev, &config(0.003), &spec).unwrap();
    let sweep = lr_sweep(&start(), &corpus, &dev, &config(1.0), &spec, &[0.003], 1).unwrap();
    assert_eq!(sweep.best_lr, 0.003);
    assert!(sweep.best.best.store.values_bits_eq(&plain.best.store));
    assert_eq!(log_tsv(&sweep.best.log), log_tsv(&plain.log));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = run(&FreezeSpec::freeze_one(Component::Softmax)).best;
    ck.meta.insert("note".into(), "a b=c".into());
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&p1).unwrap();
    let back = Checkpoint::load(&p1).unwrap();
    back.save(&p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert!(back.store.values_bits_eq(&ck.store));
    assert_eq!(back.config, ck.config);
    assert_eq!(back.meta, ck.meta);
    for (id, p) in back.store.iter() {
        assert_eq!(p.trainable, ck.store.get(id).trainable);
        assert_eq!(p.component, ck.store.get(id).component);
    }
}

#[test]
fn damaged_checkpoints_rejected() {
    let bytes = start().to_bytes().unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn smoothed_loss_matches_hand_formula() {
    // Logits are log(1, 2, 3), so probabilities are (1, 2, 3) / 6.
    let mut g = Graph::new();
    let logits = g.constant(Tensor::from_rows(&[vec![0.0, 2f64.ln(), 3f64.ln()]]).unwrap());
    let eps = 0.1;
    let loss = g.cross_entropy(logits, &[2], eps, true).unwrap();
    let p: [f64; 3] = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    let want = -((1.0 - eps) * p[2].ln() + eps / 2.0 * (p[0].ln() + p[1].ln()));
    assert!((g.scalar(loss) - want).abs() < 1e-14);
}

fn scalar_store(value: f64, grad: f64) -> ParameterStore {
    let mut s = ParameterStore::new();
    let id = s.add("theta", Component::Encoder, Tensor::vector(&[value])).unwrap();
    s.get_mut(id).grad = Tensor::vector(&[grad]);
    s
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let mut s = scalar_store(0.5, 1.0);
    let mut adam = Adam::new(&s);
    adam.step(&mut s, 0.0003).unwrap();
    let theta = s.by_name("theta").unwrap().value.data()[0];
    let want = 0.5 - 0.0003 / (1.0 + 1e-8);
    assert!((theta - want).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_is_refused() {
    let mut s = scalar_store(0.5, f64::NAN);
    let mut adam = Adam::new(&s);
    assert!(matches!(adam.step(&mut s, 0.01), Err(Error::NonFinite(_))));
    assert_eq!(s.by_name("theta").unwrap().value.data()[0], 0.5);
}

proptest! {
    #[test]
    fn clipping_bounds_the_norm(grads in prop::collection::vec(-10.0f64..10.0, 1..20), max in 0.1f64..5.0) {
        let mut s = ParameterStore::new();
        let id = s.add("w", Component::Decoder, Tensor::zeros(&[grads.len()])).unwrap();
        s.get_mut(id).grad = Tensor::vector(&grads);
        let before = clip_gradients(&mut s, max);
        let after = s.get(id).grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        prop_assert!(after <= max * (1.0 + 1e-12));
        if before <= max {
            prop_assert_eq!(s.get(id).grad.data(), &grads[..]);
        }
    }

    #[test]
    fn regime_names_round_trip(pick in 0usize..11) {
        let spec = FreezeSpec::study()[pick].clone();
        prop_assert_eq!(FreezeSpec::parse(&spec.name()).unwrap(), spec);
    }
}
