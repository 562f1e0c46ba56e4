use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hymate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hymate"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TOY: &str = "\
# tiny run
n_patients = 80
mean_seq_len = 15
pretrain_epochs = 2
finetune_epochs = 2
n_seeds = 2
";

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.cfg"), TOY).unwrap();
    dir
}

fn read(dir: &Path, file: &str) -> String {
    fs::read_to_string(dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

#[test]
fn finetune_without_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hymate(dir.path(), &["finetune"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hymate(dir.path(), &["gen", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = hymate(dir.path(), &["gen", "--set", "n_patients=lots"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_patients") && err.contains("Usage"), "{err}");
    let out = hymate(dir.path(), &["gen", "--mode", "quadratic"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = hymate(dir.path(), &["verify"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(!text.contains("FAIL"), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 15);
}

#[test]
fn gen_writes_the_dataset_and_is_repeatable() {
    let dir = toy_dir();
    let d = dir.path();
    ok(&hymate(d, &["gen", "--spec", "toy.cfg", "--out", "a"]));
    for f in ["data.jsonl", "vocab.json", "stats.json", "run_config.txt"] {
        assert!(d.join("a").join(f).is_file(), "missing {f}");
    }
    assert_eq!(read(&d.join("a"), "data.jsonl").lines().count(), 80);
    ok(&hymate(
        d,
        &["gen", "--config", "a/run_config.txt", "--out", "b"],
    ));
    for f in ["data.jsonl", "vocab.json", "stats.json", "run_config.txt"] {
        assert_eq!(read(&d.join("a"), f), read(&d.join("b"), f), "{f} differs");
    }
    ok(&hymate(d, &["gen", "--spec", "toy.cfg", "--seed", "9", "--out", "c"]));
    assert_ne!(read(&d.join("a"), "data.jsonl"), read(&d.join("c"), "data.jsonl"));
}

#[test]
fn pipeline_commands_chain_and_rerun_identically() {
    let dir = toy_dir();
    let d = dir.path();
    ok(&hymate(d, &["gen", "--spec", "toy.cfg", "--out", "data"]));
    ok(&hymate(
        d,
        &["pretrain", "--spec", "toy.cfg", "--data", "data", "--out", "pre"],
    ));
    assert!(read(&d.join("pre"), "pretrain_history.csv")
        .starts_with("epoch,split,loss,auroc,auprc\n"));

    let finetune = |out: &str| {
        ok(&hymate(
            d,
            &[
                "finetune",
                "--spec",
                "toy.cfg",
                "--data",
                "data/data.jsonl",
                "--checkpoint",
                "pre/checkpoint.json",
                "--out",
                out,
            ],
        ))
    };
    finetune("ft");
    finetune("ft2");
    for f in [
        "metrics.csv",
        "finetune_history.csv",
        "checkpoint.json",
        "run_config.txt",
    ] {
        assert_eq!(read(&d.join("ft"), f), read(&d.join("ft2"), f), "{f} differs");
    }
    let metrics = read(&d.join("ft"), "metrics.csv");
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,split,loss,auroc,auprc");
    assert!(lines[1].split(',').nth(1) == Some("val"));
    assert!(lines[2].split(',').nth(1) == Some("test"));

    let ck = ["--data", "data", "--checkpoint", "ft/checkpoint.json"];
    let mut eval = vec!["eval", "--spec", "toy.cfg", "--out", "ev"];
    eval.extend(ck);
    ok(&hymate(d, &eval));
    // evaluating the saved model reproduces the fine-tuning metrics
    let rows = |s: String| -> Vec<String> {
        s.lines()
            .skip(1)
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    assert_eq!(rows(read(&d.join("ev"), "metrics.csv")), rows(metrics));
    assert!(read(&d.join("ev"), "predictions.csv").starts_with("record_id,probability,label\n"));

    let mut explain = vec!["explain", "--spec", "toy.cfg", "--out", "ex"];
    explain.extend(ck);
    ok(&hymate(d, &explain));
    let ex = read(&d.join("ex"), "explain.csv");
    assert!(ex.starts_with("record_id,t,feature,value,alpha\n"));
    let imp = read(&d.join("ex"), "importance.csv");
    assert!(imp.starts_with("variable,score\n"));
    // 10 features and 4 statics
    assert_eq!(imp.lines().count(), 15);
}

#[test]
fn ablate_writes_table_rows() {
    let dir = toy_dir();
    let d = dir.path();
    let out = hymate(
        d,
        &[
            "ablate",
            "--spec",
            "toy.cfg",
            "--ablate",
            "no_mamba",
            "--ablate",
            "no_fusion",
            "--out",
            "ab",
        ],
    );
    ok(&out);
    let csv = read(&d.join("ab"), "ablation.csv");
    let labels: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        labels,
        ["w/o Mamba blocks", "w/o Attention fusion", "HyMaTE (full)"]
    );
}

#[test]
fn threads_flag_does_not_change_results() {
    let dir = toy_dir();
    let d = dir.path();
    ok(&hymate(d, &["gen", "--spec", "toy.cfg", "--out", "data"]));
    for (t, out) in [("1", "one"), ("3", "three")] {
        ok(&hymate(
            d,
            &[
                "finetune", "--spec", "toy.cfg", "--data", "data", "--threads", t, "--out", out,
            ],
        ));
    }
    for f in ["metrics.csv", "checkpoint.json"] {
        assert_eq!(read(&d.join("one"), f), read(&d.join("three"), f), "{f}");
    }
}
