use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccead_core::metrics::corpus_cer;

const BIN: &str = env!("CARGO_BIN_EXE_ccead");

fn ccead(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CCEAD_CHECKPOINT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ccead(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Builds a dictionary noise model over a small corpus.
fn noise_fixture(dir: &Path) -> PathBuf {
    // The two transpositions are rejected as multi-edit pairs.
    let typos = "th\tthe\nteh\tthe\nadress\taddress\nwich\twhich\nther\ttheir\n\
                 becuse\tbecause\nbeleive\tbelieve\nfrend\tfriend\nuntill\tuntil\nweired\tweird\n";
    let corpus: String = (0..400)
        .map(|i| match i % 4 {
            0 => "the friend said their address was weird\n",
            1 => "i believe we will receive it until then\n",
            2 => "which one because the other is gone\n",
            _ => "plain words with nothing to change here\n",
        })
        .collect();
    fs::write(dir.join("typos.tsv"), typos).unwrap();
    fs::write(dir.join("corpus.txt"), corpus).unwrap();
    let out = dir.join("noise");
    ok(&[
        "build-noise",
        "--typos",
        s(&dir.join("typos.tsv")),
        "--corpus",
        s(&dir.join("corpus.txt")),
        "--out",
        s(&out),
        "--seed",
        "3",
    ]);
    out
}

#[test]
fn build_noise_writes_aligned_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = noise_fixture(dir.path());
    let noisy = fs::read_to_string(out.join("noisy.txt")).unwrap();
    let clean = fs::read_to_string(out.join("clean.txt")).unwrap();
    assert_eq!(noisy.lines().count(), 400);
    assert_eq!(clean.lines().count(), 400);
    for (n, c) in noisy.lines().zip(clean.lines()) {
        assert_eq!(n.split(' ').count(), c.split(' ').count());
    }
    assert!(noisy.contains("th frend said ther adress was weired"));
    let rejects = fs::read_to_string(out.join("rejects.tsv")).unwrap();
    assert_eq!(rejects.lines().count(), 2);
    assert!(out.join("noise_model.tsv").exists());
}

#[test]
fn zero_rate_injection_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let noise = noise_fixture(dir.path());
    let corpus = dir.path().join("mixed.txt");
    fs::write(&corpus, "the friend\r\nwhich one\n\nno newline at the end").unwrap();
    for mode in ["dict", "sampled"] {
        let out = dir.path().join(format!("out_{mode}.txt"));
        ok(&[
            "inject",
            "--corpus",
            s(&corpus),
            "--noise-model",
            s(&noise.join("noise_model.tsv")),
            "--mode",
            mode,
            "--rate",
            "0",
            "--out",
            s(&out),
        ]);
        assert_eq!(
            fs::read(&out).unwrap(),
            fs::read(&corpus).unwrap(),
            "{mode}"
        );
    }
}

#[test]
fn identity_eval_reports_the_corpus_noise_cer() {
    let dir = tempfile::tempdir().unwrap();
    let noise = noise_fixture(dir.path());
    let noisy = fs::read_to_string(noise.join("noisy.txt")).unwrap();
    let clean = fs::read_to_string(noise.join("clean.txt")).unwrap();
    let expected = corpus_cer(noisy.lines().zip(clean.lines()));
    assert!(expected > 0.0);
    let report = ok(&[
        "eval",
        "--identity",
        "--noisy",
        s(&noise.join("noisy.txt")),
        "--clean",
        s(&noise.join("clean.txt")),
    ]);
    let mut rows = report.lines().map(|l| l.split('\t').collect::<Vec<_>>());
    let header = rows.next().unwrap();
    let row = rows.next().unwrap();
    let col = |name: &str| -> f64 {
        row[header.iter().position(|h| *h == name).unwrap()]
            .parse()
            .unwrap()
    };
    // Printed to four decimals.
    assert!(
        (col("cer") - expected).abs() <= 5e-5,
        "{report} vs {expected}"
    );
    assert_eq!(col("cer"), col("input_cer"));
}

#[test]
fn trained_micro_model_corrects_its_memorized_sentence() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    fs::create_dir_all(configs.join("micro")).unwrap();
    for f in [
        "micro.cfg",
        "micro/train_noisy.txt",
        "micro/train_clean.txt",
    ] {
        fs::copy(repo_configs().join(f), configs.join(f)).unwrap();
    }
    let log = ok(&["train", "--config", s(&configs.join("micro.cfg"))]);
    assert!(log.contains("best_epoch"));
    let ckpt = configs.join("micro/model.ckpt");
    let metrics = fs::read_to_string(configs.join("micro/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 301);

    let out = ok(&[
        "correct",
        "--checkpoint",
        s(&ckpt),
        "--max-completions",
        "0",
        "thanka i will",
    ]);
    assert_eq!(out.trim_end(), "thanks i will");

    let json = ok(&["correct", "--checkpoint", s(&ckpt), "--json", "hw are yoy"]);
    let resp: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(resp["corrected"], "how are you");
    assert_eq!(resp["tokens"].as_array().unwrap().len(), 3);

    let table = ok(&["export-embeddings", "--checkpoint", s(&ckpt), "--chars"]);
    assert_eq!(table.lines().count(), 69);
    assert_eq!(table.lines().next().unwrap().split('\t').count(), 5);
}

#[test]
fn synthetic_generation_splits_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("desk");
    let summary = ok(&["gen-synthetic", "--variants", "10", "--out", s(&out)]);
    assert!(summary.starts_with("pairs\t3000\n"), "{summary}");
    let count = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().count();
    assert_eq!(count("train_noisy.txt"), 2400);
    assert_eq!(count("dev_clean.txt"), 300);
    assert_eq!(count("test_noisy.txt") + count("test_clean.txt"), 600);
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    assert_eq!(ccead(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ccead(&["correct", "hello"]).status.code(), Some(2));
    let missing = ccead(&[
        "correct",
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "hello",
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/model.ckpt"));
}

#[test]
fn damaged_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"CCEAD\0garbage").unwrap();
    let out = ccead(&["correct", "--checkpoint", s(&bad), "x"]);
    assert_eq!(out.status.code(), Some(1));
}
