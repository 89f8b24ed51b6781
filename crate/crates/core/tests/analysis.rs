//! RMS change, noise injection and sensitivity sweeps against direct oracles.

use std::sync::OnceLock;

use freezelab::analysis::{
    build_table5, inject_noise, interpolate_bleu_drop, rms_change, sensitivity_sweep, EvalSet, RmsReport,
    SensitivityCurve, SweepPlan,
};
use freezelab::data::{Codec, DomainPair};
use freezelab::eval::corpus_bleu;
use freezelab::experiment::{generate, train_ood, Settings};
use freezelab::model::{build_model, ModelConfig, ParameterStore, Seq2Seq};
use freezelab::nn::{SeededRng, Tensor};
use freezelab::trainer::Checkpoint;
use freezelab::Component;
use proptest::prelude::*;

/// Square root of the mean squared difference, looked up tensor by tensor.
fn direct_rms(a: &ParameterStore, b: &ParameterStore, c: Component) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for p in a.component(c) {
        let q = b.by_name(&p.name).unwrap();
        for (x, y) in p.value.data().iter().zip(q.value.data()) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    (sum / n as f64).sqrt()
}

fn random_store(seed: u64) -> ParameterStore {
    let mut cfg = ModelConfig::desk(30, 25);
    cfg.embed_dim = 8;
    cfg.hidden_dim = 6;
    build_model(&cfg, &mut SeededRng::new(seed)).unwrap()
}

#[test]
fn rms_matches_direct_formula() {
    for seed in 0..10 {
        let (a, b) = (random_store(seed), random_store(seed + 100));
        for c in Component::ALL {
            let got = rms_change(&a, &b, c).unwrap();
            assert!((got - direct_rms(&a, &b, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn untouched_component_reports_exactly_zero() {
    let a = random_store(1);
    let b = inject_noise(&a, Component::Decoder, 0.3, 9).unwrap();
    let report = RmsReport::between(&a, &b).unwrap();
    for c in Component::ALL {
        let r = report.get(c).unwrap();
        if c == Component::Decoder {
            assert!(r > 0.2);
        } else {
            assert_eq!(r, 0.0);
        }
    }
}

#[test]
fn two_scalar_example() {
    let store = |x: f64, y: f64| {
        let mut s = ParameterStore::new();
        s.add("a", Component::Softmax, Tensor::vector(&[x])).unwrap();
        s.add("b", Component::Softmax, Tensor::vector(&[y])).unwrap();
        s
    };
    let r = rms_change(&store(1.0, 1.0), &store(4.0, 5.0), Component::Softmax).unwrap();
    assert!((r - 12.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn mismatched_layouts_rejected() {
    let mut cfg = ModelConfig::desk(30, 25);
    cfg.embed_dim = 8;
    cfg.hidden_dim = 6;
    let a = build_model(&cfg, &mut SeededRng::new(1)).unwrap();
    cfg.src_vocab = 31;
    let b = build_model(&cfg, &mut SeededRng::new(1)).unwrap();
    assert!(rms_change(&a, &b, Component::SourceEmbedding).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rms_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000, pick in 0usize..5) {
        let (a, b) = (random_store(s1), random_store(s2));
        let c = Component::ALL[pick];
        prop_assert_eq!(rms_change(&a, &b, c).unwrap(), rms_change(&b, &a, c).unwrap());
    }

    #[test]
    fn rms_ignores_insertion_order(vals in prop::collection::vec(-3.0f64..3.0, 6)) {
        let build = |order: &[usize], shift: f64| {
            let mut s = ParameterStore::new();
            for &i in order {
                let name = format!("p{i}");
                let v = [vals[2 * i] + shift, vals[2 * i + 1] * shift];
                s.add(&name, Component::Encoder, Tensor::vector(&v)).unwrap();
            }
            s
        };
        let r1 = rms_change(&build(&[0, 1, 2], 0.0), &build(&[0, 1, 2], 1.5), Component::Encoder).unwrap();
        let r2 = rms_change(&build(&[2, 0, 1], 0.0), &build(&[1, 2, 0], 1.5), Component::Encoder).unwrap();
        prop_assert_eq!(r1, r2);
    }
}

fn big_store() -> ParameterStore {
    let mut s = ParameterStore::new();
    let mut rng = SeededRng::new(3);
    s.add("enc", Component::Encoder, Tensor::uniform(&[100_000], -0.1, 0.1, &mut rng)).unwrap();
    s.add("dec", Component::Decoder, Tensor::uniform(&[50], -0.1, 0.1, &mut rng)).unwrap();
    s.add("emb", Component::TargetEmbedding, Tensor::uniform(&[50], -0.1, 0.1, &mut rng)).unwrap();
    s
}

fn noise_moments(a: &ParameterStore, b: &ParameterStore) -> (f64, f64) {
    let (x, y) = (a.by_name("enc").unwrap().value.data(), b.by_name("enc").unwrap().value.data());
    let d: Vec<f64> = x.iter().zip(y).map(|(x, y)| y - x).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn injected_noise_has_the_requested_moments() {
    let a = big_store();
    let n = 100_000f64;
    for (sigma, seed) in [(0.05, 1), (0.1, 2)] {
        let b = inject_noise(&a, Component::Encoder, sigma, seed).unwrap();
        let (mean, std) = noise_moments(&a, &b);
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        assert!((std - sigma).abs() <= 0.02 * sigma, "std {std}");
        for name in ["dec", "emb"] {
            assert!(a.by_name(name).unwrap().value.bits_eq(&b.by_name(name).unwrap().value));
        }
    }
}

#[test]
fn different_seeds_draw_different_noise_of_equal_size() {
    let a = big_store();
    let b1 = inject_noise(&a, Component::Encoder, 0.1, 7).unwrap();
    let b2 = inject_noise(&a, Component::Encoder, 0.1, 8).unwrap();
    assert!(!b1.values_bits_eq(&b2));
    let (_, s1) = noise_moments(&a, &b1);
    let (_, s2) = noise_moments(&a, &b2);
    assert!((s1 - s2).abs() <= 0.02 * s1);
    assert!(inject_noise(&a, Component::Encoder, 0.1, 7).unwrap().values_bits_eq(&b1));
}

#[test]
fn noise_arguments_validated() {
    let a = big_store();
    assert!(inject_noise(&a, Component::Encoder, 0.0, 1).unwrap().values_bits_eq(&a));
    assert!(inject_noise(&a, Component::Encoder, -0.1, 1).is_err());
    assert!(inject_noise(&a, Component::Encoder, f64::NAN, 1).is_err());
    assert!(inject_noise(&a, Component::Softmax, 0.1, 1).is_err());
}

struct Trained {
    pair: DomainPair,
    codec: Codec,
    ck: Checkpoint,
}

/// A small model trained once and shared by the sweep tests.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut s = Settings::tiny();
        s.sizes.ood_train = 1000;
        s.sizes.ood_test = 150;
        s.model.embed_dim = 24;
        s.model.hidden_dim = 24;
        s.train.checkpoint_interval = Some(100);
        s.train.max_checkpoints = 10;
        let pair = generate(&s, 2).unwrap();
        let (codec, run) = train_ood(&s, &pair, 2).unwrap();
        Trained {
            pair,
            codec,
            ck: run.best,
        }
    })
}

fn sweep(c: Component, seed: u64, jobs: usize) -> SensitivityCurve {
    let t = trained();
    let model = Seq2Seq::new(&t.ck.config, &t.ck.store).unwrap();
    let plan = SweepPlan {
        sigmas: vec![0.0, 0.05, 0.5],
        trials: 8,
        seed,
        jobs,
    };
    let test = &t.pair.ood.test;
    let eval = EvalSet {
        name: "ood.test",
        src: &test.src,
        refs: &test.tgt,
    };
    sensitivity_sweep(&model, &t.ck.store, &t.codec, c, &plan, eval).unwrap()
}

#[test]
fn zero_noise_row_is_the_unperturbed_score() {
    let t = trained();
    let model = Seq2Seq::new(&t.ck.config, &t.ck.store).unwrap();
    let test = &t.pair.ood.test;
    let plain = corpus_bleu(&model, &t.ck.store, &t.codec, &test.src, &test.tgt, 1).unwrap();
    assert!(plain > 20.0, "{plain}");
    let curve = sweep(Component::Encoder, 1, 1);
    assert_eq!(curve.points[0].bleus, vec![plain; 8]);
    assert_eq!(curve.baseline(), plain);
    assert!(curve.points[2].mean() < plain - 0.5);
}

#[test]
fn independent_sweeps_agree_and_threads_do_not_matter() {
    let c = Component::Decoder;
    let a = sweep(c, 1, 1);
    let b = sweep(c, 2, 1);
    for (p, q) in a.points.iter().zip(&b.points) {
        assert!((p.mean() - q.mean()).abs() <= 1.0, "sigma {}: {} vs {}", p.sigma, p.mean(), q.mean());
    }
    assert_eq!(sweep(c, 1, 2), a);
}

#[test]
fn interpolation_stays_inside_the_grid() {
    let curve = sweep(Component::Softmax, 3, 1);
    let at = |r| interpolate_bleu_drop(&curve, r).unwrap();
    assert_eq!(at(0.0), 0.0);
    assert_eq!(at(0.5), curve.points[2].mean() - curve.baseline());
    let mid = at(0.275);
    let (d1, d2) = (at(0.05), at(0.5));
    assert!((mid - (d1 + d2) / 2.0).abs() < 1e-12);
    assert!(interpolate_bleu_drop(&curve, 0.6).is_err());
    let full = RmsReport {
        rows: vec![(Component::Softmax, 0.05)],
    };
    let table = build_table5(&full, std::slice::from_ref(&curve)).unwrap();
    assert_eq!(table.rows, vec![(Component::Softmax, 0.05, d1)]);
}
