use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mojidistill"));
    c.env_remove("MOJIDISTILL_SEED");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

/// Records outside comment lines.
fn records(text: &str) -> usize {
    text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).count()
}

const TINY: [&str; 8] = ["--set", "embed_dim=6", "--set", "units=6", "--set", "max_epochs=1", "--set", "lr_new=0.01"];

/// synth + both preprocess runs + a one-epoch pretrain.
fn prepared() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "syn", "--size", "600"]);
    ok(d, &["preprocess", "--corpus", "syn/corpus.jsonl", "--emoji-set", "syn/emoji_set.tsv", "--out", "pre"]);
    ok(d, &["preprocess", "--labeled", "--corpus", "syn/target.jsonl", "--out", "tgt"]);
    ok(d, &[&["pretrain", "--corpus", "pre", "--out", "pt"][..], &TINY].concat());
    tmp
}

#[test]
fn balanced_preprocess_on_four_classes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "syn", "--size", "600"]);
    ok(d, &["preprocess", "--corpus", "syn/corpus.jsonl", "--emoji-set", "syn/emoji_set.tsv", "--out", "pre"]);
    assert_eq!(records(&read(d, "pre/val.jsonl")), 40);
    assert_eq!(records(&read(d, "pre/test.jsonl")), 40);
    let stats = read(d, "pre/stats.tsv");
    assert!(stats.contains("rejected_url\t"));
    assert!(stats.starts_with("# seed=0\n# config_hash="));
}

#[test]
fn preprocess_rerun_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "syn", "--size", "300"]);
    for out in ["a", "b"] {
        ok(
            d,
            &[
                "preprocess",
                "--corpus",
                "syn/corpus.jsonl",
                "--emoji-set",
                "syn/emoji_set.tsv",
                "--out",
                out,
                "--seed",
                "3",
            ],
        );
    }
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt", "manifest.tsv", "stats.tsv", "run.meta"] {
        assert_eq!(read(d, &format!("a/{f}")), read(d, &format!("b/{f}")), "{f}");
    }
    ok(
        d,
        &[
            "preprocess",
            "--corpus",
            "syn/corpus.jsonl",
            "--emoji-set",
            "syn/emoji_set.tsv",
            "--out",
            "c",
            "--seed",
            "4",
        ],
    );
    assert_ne!(read(d, "a/val.jsonl"), read(d, "c/val.jsonl"));
}

#[test]
fn all_url_corpus_is_empty_output() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "syn", "--size", "10"]);
    std::fs::write(
        d.join("urls.jsonl"),
        "{\"id\":\"a\",\"text\":\"see https://x.org \u{1F602}\"}\n{\"id\":\"b\",\"text\":\"www.y.com \u{1F621}\"}\n",
    )
    .unwrap();
    let out = run_in(d, &["preprocess", "--corpus", "urls.jsonl", "--emoji-set", "syn/emoji_set.tsv", "--out", "p"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(read(d, "p/stats.tsv").contains("rejected_url\t2"));
}

#[test]
fn malformed_record_reports_line() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "syn", "--size", "10"]);
    std::fs::write(d.join("bad.jsonl"), "{\"id\":\"a\",\"text\":\"hi \u{1F602}\"}\n\n{oops\n").unwrap();
    let out = run_in(d, &["preprocess", "--corpus", "bad.jsonl", "--emoji-set", "syn/emoji_set.tsv", "--out", "p"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn config_errors_and_precedence() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "syn", "--size", "200"]);
    let out = run_in(d, &["synth", "--out", "s2", "--set", "no_such_key=1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    std::fs::write(d.join("run.cfg"), "# split sizes\nper_class_val = 5\nper_class_test = 5\n").unwrap();
    let base =
        ["preprocess", "--corpus", "syn/corpus.jsonl", "--emoji-set", "syn/emoji_set.tsv", "--config", "run.cfg"];
    ok(d, &[&base[..], &["--out", "f"]].concat());
    assert_eq!(records(&read(d, "f/val.jsonl")), 20);
    ok(d, &[&base[..], &["--out", "g", "--set", "per_class_val=7"]].concat());
    assert_eq!(records(&read(d, "g/val.jsonl")), 28);
    assert_ne!(read(d, "f/run.meta"), read(d, "g/run.meta"));
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = bin()
        .current_dir(d)
        .env("MOJIDISTILL_SEED", "42")
        .args(["synth", "--out", "e", "--size", "5"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(read(d, "e/corpus.jsonl").starts_with("# seed=42\n"));
    ok(d, &["synth", "--out", "f", "--size", "5", "--seed", "42"]);
    assert_eq!(read(d, "e/corpus.jsonl"), read(d, "f/corpus.jsonl"));
}

#[test]
fn score_prints_five_ranked_probabilities() {
    let tmp = prepared();
    let d = tmp.path();
    let args =
        ["score", "--checkpoint", "pt/model.ckpt", "--vocab", "pt/vocab.txt", "--emoji-set", "syn/emoji_set.tsv"];
    let a = ok(d, &[&args[..], &["i miss you so much"]].concat());
    let b = ok(d, &[&args[..], &["i miss you so much"]].concat());
    assert_eq!(a, b);
    let probs: Vec<f64> = a.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    // The demo inventory has four emojis, so all of them are listed.
    assert_eq!(probs.len(), 4);
    assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    assert!(probs.iter().sum::<f64>() <= 1.0 + 1e-5);

    let out = run_in(d, &[&args[..], &["  "]].concat());
    assert_eq!(code(&out), 2);
}

#[test]
fn checkpoint_vocab_mismatch_is_rejected() {
    let tmp = prepared();
    let d = tmp.path();
    for args in [
        vec!["score", "--checkpoint", "pt/model.ckpt", "--vocab", "tgt/vocab.txt", "hello"],
        vec!["finetune", "--checkpoint", "pt/model.ckpt", "--vocab", "tgt/vocab.txt", "--corpus", "tgt", "--out", "ft"],
    ] {
        let out = run_in(d, &args);
        assert_eq!(code(&out), 2, "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
    }
}

#[test]
fn unknown_strategy_is_an_input_error() {
    let tmp = prepared();
    let out = run_in(
        tmp.path(),
        &[
            "finetune",
            "--checkpoint",
            "pt/model.ckpt",
            "--vocab",
            "pt/vocab.txt",
            "--corpus",
            "tgt",
            "--strategy",
            "thaw-all",
            "--out",
            "ft",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_is_a_numerical_failure() {
    let tmp = prepared();
    let out = run_in(
        tmp.path(),
        &[&["pretrain", "--corpus", "pre", "--out", "boom"][..], &TINY[..6], &["--set", "lr_new=1e38"]].concat(),
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn downstream_commands_write_reports() {
    let tmp = prepared();
    let d = tmp.path();
    ok(
        d,
        &[
            &[
                "finetune",
                "--checkpoint",
                "pt/model.ckpt",
                "--vocab",
                "pt/vocab.txt",
                "--corpus",
                "tgt",
                "--strategy",
                "last",
                "--out",
                "ft",
            ][..],
            &TINY[4..],
        ]
        .concat(),
    );
    let stages = read(d, "ft/stages.tsv");
    assert_eq!(records(&stages), 2, "header plus the single `last` stage");
    assert!(d.join("ft/curve-0-softmax-new.tsv").exists());
    assert!(read(d, "ft/timing.tsv").contains("wall_seconds"));
    assert!(!read(d, "ft/run.meta").contains("timing.tsv"));

    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "ft/model.ckpt",
            "--vocab",
            "ft/vocab.txt",
            "--corpus",
            "tgt/test.jsonl",
            "--out",
            "ev",
            "--k",
            "1",
        ],
    );
    let report = read(d, "ev/report.tsv");
    assert!(report.contains("top_1_accuracy\t"));
    assert!(report.contains("macro_f1\t"));

    // Re-evaluating the stored checkpoint reproduces the stored report.
    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "ft/model.ckpt",
            "--vocab",
            "ft/vocab.txt",
            "--corpus",
            "tgt/test.jsonl",
            "--out",
            "ev2",
            "--k",
            "1",
            "--against",
            "ev/predictions.tsv",
        ],
    );
    let again = read(d, "ev2/report.tsv");
    assert!(again.starts_with(&report));
    let p: f64 = again.lines().find_map(|l| l.strip_prefix("bootstrap_p\t")).unwrap().parse().unwrap();
    assert_eq!(p, 1.0, "identical predictions never beat each other");

    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "pt/model.ckpt",
            "--vocab",
            "pt/vocab.txt",
            "--corpus",
            "pre/test.jsonl",
            "--out",
            "evp",
        ],
    );
    ok(d, &["cluster", "--predictions", "evp/predictions.tsv", "--emoji-set", "syn/emoji_set.tsv", "--out", "cl"]);
    assert_eq!(records(&read(d, "cl/dendrogram.tsv")), 1 + 3);
    assert!(read(d, "cl/dendrogram.nwk").trim_end().ends_with(';'));
    assert_eq!(records(&read(d, "cl/correlation.tsv")), 1 + 4);

    ok(d, &["coverage", "--corpus", "tgt", "--vocab", "pt/vocab.txt", "--out", "cov"]);
    let cov = read(d, "cov/coverage.tsv");
    let rows: Vec<Vec<&str>> = cov.lines().filter(|l| !l.starts_with('#')).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0], ["split", "own", "last", "full_chain_thaw"]);
    for row in &rows[1..] {
        let v: Vec<f64> = row[1..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[2] >= v[1], "extension never lowers coverage: {row:?}");
    }
}
