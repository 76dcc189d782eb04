use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tagood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagood")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tagood(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = "n_train = 120\nn_test_ind = 30\nn_test_ood = 30\nepochs = 2\nwidth = 16\nn_heads = 2\nbatch_size = 32\n";

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn full_chain_writes_scores_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = small_config(t);
    let (data, vocab, model, scores, eval) = (t.join("data"), t.join("vocab"), t.join("model"), t.join("scores"), t.join("eval"));

    let stdout = ok(&["simulate", "--config", &cfg, "--out", &s(&data)]);
    assert!(stdout.contains("OUT "));
    assert!(data.join("manifest.tsv").exists());

    ok(&["build-vocab", "--config", &cfg, "--store", &s(&data), "--out", &s(&vocab)]);
    let vocab_file = s(&vocab.join("ind_vocab.tsv"));
    ok(&["train", "--config", &cfg, "--store", &s(&data), "--vocab", &vocab_file, "--out", &s(&model)]);
    for f in ["params.tgpn", "centers.tgcb", "train_report.csv", "run.meta"] {
        assert!(model.join(f).exists(), "missing {f}");
    }
    let report = fs::read_to_string(model.join("train_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);

    ok(&[
        "score", "--config", &cfg, "--store", &s(&data), "--vocab", &vocab_file,
        "--params", &s(&model.join("params.tgpn")), "--centers", &s(&model.join("centers.tgcb")),
        "--metric", "all", "--out", &s(&scores),
    ]);
    let files: Vec<String> = ["cosine", "tag_score"].iter().map(|m| s(&scores.join(format!("{m}.csv")))).collect();
    ok(&["eval", "--scores", &files.join(","), "--out", &s(&eval)]);

    let report = fs::read_to_string(eval.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "variant,metric,auroc,fpr95");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("cosine,cosine,"));
    let samples = fs::read_to_string(eval.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 2 * 60);
}

#[test]
fn eval_without_scores_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tagood(&["eval", "--out", &s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no score files"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = tagood(&["train", "--nonsense", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_store_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tagood(&["build-vocab", "--store", &s(&tmp.path().join("absent")), "--out", &s(&tmp.path().join("v"))]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn ablate_reports_four_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = small_config(t);
    let data = t.join("data");
    ok(&["simulate", "--config", &cfg, "--out", &s(&data)]);
    ok(&["ablate", "--config", &cfg, "--store", &s(&data), "--out", &s(&t.join("abl"))]);
    let report = fs::read_to_string(t.join("abl/report.csv")).unwrap();
    let variants: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["tag_score", "mean_cs", "ce_only", "full"]);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = small_config(t);
    ok(&["simulate", "--config", &cfg, "--n_test_ind", "7", "--out", &s(&t.join("d"))]);
    let meta = fs::read_to_string(t.join("d/run.meta")).unwrap();
    assert!(meta.lines().any(|l| l.replace(' ', "") == "n_test_ind=7"), "{meta}");
    assert!(meta.lines().any(|l| l.replace(' ', "") == "n_train=120"), "{meta}");
    let ids = fs::read_to_string(t.join("d/ground_truth.tsv")).unwrap();
    assert_eq!(ids.lines().filter(|l| l.starts_with("ind_")).count(), 7);
}
