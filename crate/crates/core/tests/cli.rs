//! The binary end to end: exit codes, reproducible data and the step-by-step
//! pipeline script against the single-process `run` command.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_freezelab");

fn freezelab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    freezelab(args).status.code().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = freezelab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/run_pipeline.sh")
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--preset", "tiny", "--seed", "7", "--out-dir", s(d)]);
    }
    for f in ["ood.train.src", "ood.train.tgt", "ind.test.src", "ind.dev.tgt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("manifest"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("command="))
            .map(str::to_string)
            .collect()
    };
    let m = manifest(&a);
    assert_eq!(m, manifest(&b));
    assert!(m.iter().any(|l| l.starts_with("corpus.ind.test.src=")));
    assert!(m.iter().any(|l| l == "seed=7"));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["continue", "--from", "x", "--data-dir", "d", "--out", "o"]), 2);
    assert_eq!(code(&["gen-data", "--out-dir", "/tmp/x", "--set", "data.nonsense=1"]), 2);
    assert_eq!(code(&["eval", "--checkpoint", "/nonexistent/ck", "--test", "/nonexistent/t"]), 3);
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["analyze-rms", "--a", s(&junk), "--b", s(&junk)]), 4);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn continuing_on_other_data_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["gen-data", "--preset", "tiny", "--seed", "1", "--out-dir", s(&p("a"))]);
    ok(&["gen-data", "--preset", "tiny", "--seed", "2", "--out-dir", s(&p("b"))]);
    let tiny = ["--preset", "tiny", "--set", "train.max_checkpoints=1"];
    ok(&[&["train-ood", "--data-dir", s(&p("a")), "--out", s(&p("ood.ckpt"))][..], &tiny].concat());
    let (ood, out) = (p("ood.ckpt"), p("c.ckpt"));
    let cont = |data: &str| {
        let args = ["continue", "--from", s(&ood), "--data-dir", data, "--no-freeze", "--out", s(&out)];
        code(&[&args[..], &tiny].concat())
    };
    assert_eq!(cont(s(&p("b"))), 4);
    assert!(!out.exists());
    assert_eq!(cont(s(&p("a"))), 0);
}

#[test]
fn report_with_only_baselines() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("bleu")).unwrap();
    fs::write(dir.path().join("bleu/unadapted.tsv"), "12.5000\tbleu\tind.test\n").unwrap();
    fs::write(dir.path().join("bleu/none.tsv"), "40.0000\tbleu\tind.test\n").unwrap();
    let out = ok(&["report", "--experiment-dir", s(dir.path())]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["regime\tbleu\tdelta_vs_full", "baseline-unadapted\t12.5000\t", "baseline-full\t40.0000\t"]);
}

#[test]
fn pipeline_script_matches_single_process_run() {
    let dir = tempfile::tempdir().unwrap();
    let (steps, whole) = (dir.path().join("steps"), dir.path().join("whole"));
    let out = Command::new("bash")
        .arg(script())
        .args([s(&steps), "3", "tiny"])
        .env("FREEZELAB", BIN)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fig2 = fs::read_to_string(steps.join("fig2.tsv")).unwrap();
    let rows: Vec<&str> = fig2.lines().skip(1).collect();
    assert_eq!(rows.len(), 13, "{fig2}");
    assert!(rows.iter().all(|r| r.split('\t').nth(1).unwrap().parse::<f64>().is_ok()));

    ok(&["run", "--preset", "tiny", "--seed", "3", "--out-dir", s(&whole)]);
    assert_eq!(fig2, fs::read_to_string(whole.join("fig2.tsv")).unwrap());
    for f in ["ood.ckpt", "continue/freeze-encoder.ckpt", "rms/freeze-all-but-softmax.tsv", "data/ind.train.tgt"] {
        assert_eq!(fs::read(steps.join(f)).unwrap(), fs::read(whole.join(f)).unwrap(), "{f}");
    }
    for f in ["table3.tsv", "table4.tsv", "table5.tsv", "fig3.tsv", "fig3_raw.tsv", "manifest"] {
        assert!(whole.join(f).exists(), "{f}");
    }

    let ood = whole.join("ood.ckpt");
    let test = whole.join("data/ood.test");
    let curve = ok(&[
        "sensitivity",
        "--checkpoint",
        s(&ood),
        "--component",
        "encoder",
        "--sigmas",
        "0,0.5",
        "--trials",
        "2",
        "--test",
        s(&test),
    ]);
    assert_eq!(curve.lines().count(), 3);
    let ppl = ok(&["eval", "--checkpoint", s(&ood), "--test", s(&test), "--metric", "ppl"]);
    assert!(ppl.starts_with(|c: char| c.is_ascii_digit()) && ppl.contains("\tppl\tood.test"));
}
