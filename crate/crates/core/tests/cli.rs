use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use spanclean::config::RunConfig;
use spanclean::corpus::parse_spans;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spanclean"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spanclean")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, sentences: &str) {
    ok(
        dir,
        &[
            "synth",
            "--seed",
            "2",
            "--sentences",
            sentences,
            "--test-sentences",
            "30",
            "--out",
            "data",
        ],
    );
}

#[test]
fn missing_train_path_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["clean"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.train"));
    let out = run(dir.path(), &["clean", "--train", "nope.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.train"));
}

#[test]
fn invalid_values_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "20");
    for args in [
        &["clean", "--train", "data/train.jsonl", "--k-pos", "0"][..],
        &["clean", "--train", "data/train.jsonl", "--topneg-ratio", "1.5"],
        &["clean", "--train", "data/train.jsonl", "--preset", "unknown"],
    ] {
        assert_eq!(run(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
    fs::write(dir.path().join("bad.toml"), "[clean]\nnot_a_field = 1\n").unwrap();
    assert_eq!(
        run(dir.path(), &["stats", "--config", "bad.toml"]).status.code(),
        Some(2)
    );
}

#[test]
fn malformed_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.jsonl"), "{not json}\n").unwrap();
    assert_eq!(
        run(dir.path(), &["stats", "--train", "bad.jsonl"]).status.code(),
        Some(3)
    );
}

#[test]
fn clean_writes_five_artifacts_and_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "80");
    ok(
        dir.path(),
        &["inject", "--seed", "2", "--train", "data/train.jsonl", "--out", "data"],
    );
    let summary = ok(
        dir.path(),
        &[
            "clean",
            "--seed",
            "2",
            "--train",
            "data/noisy.jsonl",
            "--k-pos",
            "100",
            "--k-neg",
            "90",
            "--out",
            "run",
        ],
    );
    assert!(summary.contains("tau_pos"));
    let mut names: Vec<String> = fs::read_dir(dir.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "cleaned.jsonl",
            "dynamics_main.jsonl",
            "dynamics_threshold.jsonl",
            "report.json",
            "thresholds.json"
        ]
    );
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
    let echoed: RunConfig = serde_json::from_value(report["run_config"].clone()).unwrap();
    assert_eq!(
        (echoed.clean.k_pos, echoed.clean.k_neg, echoed.clean.epochs),
        (100.0, 90.0, 5)
    );
    assert_eq!(echoed.seed, 2);
    // the echo reproduces the run as a config file
    let again = RunConfig::from_toml(&echoed.to_toml(), None).unwrap();
    assert_eq!(again, echoed);
    assert_eq!(report["report"]["thresholds"]["k_pos"], 100.0);
    assert!(report["report"]["audit_before"].is_array());
}

#[test]
fn config_file_and_flags_layer_over_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "60");
    fs::write(
        dir.path().join("run.toml"),
        "preset = \"small-corpus-preset\"\nseed = 4\n[data]\ntrain = \"data/train.jsonl\"\n[clean]\nk_neg = 80.0\n",
    )
    .unwrap();
    ok(
        dir.path(),
        &["clean", "--config", "run.toml", "--epochs", "2", "--out", "run"],
    );
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
    let cfg = &report["run_config"];
    assert_eq!(cfg["preset"], "small-corpus-preset");
    assert_eq!(cfg["seed"], 4);
    assert_eq!(cfg["clean"]["epochs"], 2);
    assert_eq!(cfg["clean"]["k_pos"], 100.0);
    assert_eq!(cfg["clean"]["k_neg"], 80.0);
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "40");
    synth(b.path(), "40");
    for f in ["data/train.jsonl", "data/test.jsonl"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.path().join("data/train.jsonl")).unwrap(),
        fs::read(a.path().join("data/test.jsonl")).unwrap()
    );
}

#[test]
fn inject_with_zero_rates_keeps_spans() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "30");
    ok(
        dir.path(),
        &[
            "inject",
            "--train",
            "data/train.jsonl",
            "--fn-rate",
            "0",
            "--fp-type-rate",
            "0",
            "--fp-spurious-rate",
            "0",
            "--out",
            "out",
        ],
    );
    let before = parse_spans(&fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap(), None).unwrap();
    let after = parse_spans(&fs::read_to_string(dir.path().join("out/noisy.jsonl")).unwrap(), None).unwrap();
    for (a, b) in before.sentences.iter().zip(&after.sentences) {
        assert_eq!(a.distant_spans, b.distant_spans);
    }
    assert_eq!(fs::read_to_string(dir.path().join("out/ledger.jsonl")).unwrap(), "");
}

#[test]
fn annotate_with_empty_gazetteer_leaves_sentences_unannotated() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "20");
    fs::write(dir.path().join("empty.tsv"), "").unwrap();
    ok(
        dir.path(),
        &[
            "annotate",
            "--train",
            "data/train.jsonl",
            "--gazetteer",
            "empty.tsv",
            "--out",
            "out",
        ],
    );
    let ds = parse_spans(
        &fs::read_to_string(dir.path().join("out/annotated.jsonl")).unwrap(),
        None,
    )
    .unwrap();
    assert_eq!(ds.sentences.len(), 20);
    assert!(ds.sentences.iter().all(|s| s.distant_spans.is_empty()));
    assert!(ds.has_gold());
}

#[test]
fn annotate_with_gazetteer_matches_surface_forms() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("in.jsonl"),
        "{\"tokens\":[\"Washington\",\"officials\",\"said\"],\"spans\":[{\"start\":0,\"end\":0,\"label\":\"ORG\"}]}\n",
    )
    .unwrap();
    fs::write(dir.path().join("gaz.tsv"), "Washington\tPER\n").unwrap();
    ok(
        dir.path(),
        &[
            "annotate",
            "--train",
            "in.jsonl",
            "--gazetteer",
            "gaz.tsv",
            "--out",
            "out",
        ],
    );
    let text = fs::read_to_string(dir.path().join("out/annotated.jsonl")).unwrap();
    let v: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(v["spans"][0]["label"], "PER");
    assert_eq!(v["gold_spans"][0]["label"], "ORG");
}

#[test]
fn eval_of_gold_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "20");
    let out = ok(
        dir.path(),
        &[
            "eval",
            "--pred",
            "data/test.jsonl",
            "--gold",
            "data/test.jsonl",
            "--out",
            "ev",
        ],
    );
    assert!(out.lines().last().unwrap().ends_with("F1 1.000"), "{out}");
    let audit = ok(dir.path(), &["eval", "--audit", "data/train.jsonl", "--out", "ev"]);
    assert!(audit.starts_with("type"));
}

#[test]
fn train_without_positives_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("empty.jsonl"),
        "{\"tokens\":[\"a\",\"b\"],\"spans\":[]}\n",
    )
    .unwrap();
    let out = run(dir.path(), &["train", "--train", "empty.jsonl", "--out", "m"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_then_eval_checkpoint_agree() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "60");
    ok(
        dir.path(),
        &[
            "train",
            "--train",
            "data/train.jsonl",
            "--test",
            "data/test.jsonl",
            "--epochs",
            "2",
            "--out",
            "m",
        ],
    );
    let metrics: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m/metrics.json")).unwrap()).unwrap();
    ok(
        dir.path(),
        &[
            "eval",
            "--model",
            "m/model.ckpt",
            "--gold",
            "data/test.jsonl",
            "--out",
            "ev",
        ],
    );
    let eval: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(metrics["test"], eval);
}

#[test]
fn datamap_has_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "40");
    ok(
        dir.path(),
        &["clean", "--train", "data/train.jsonl", "--epochs", "2", "--out", "run"],
    );
    ok(
        dir.path(),
        &["datamap", "--dynamics", "run/dynamics_main.jsonl", "--out", "run"],
    );
    let dumps = fs::read_to_string(dir.path().join("run/dynamics_main.jsonl"))
        .unwrap()
        .lines()
        .count();
    let csv = fs::read_to_string(dir.path().join("run/datamap.csv")).unwrap();
    assert_eq!(csv.lines().count(), dumps + 1);
    let svg = fs::read_to_string(dir.path().join("run/datamap.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), dumps);
}

#[test]
fn stats_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "25");
    let out = ok(dir.path(), &["stats", "--train", "data/train.jsonl"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["sentences"], 25);
    assert_eq!(v["masked"], 0);
}

#[test]
fn bio_input_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("in.bio"),
        "EU\tB-ORG\nrejects\tO\nGerman\tB-MISC\ncall\tO\n\nPeter\tB-PER\nBlackburn\tI-PER\n",
    )
    .unwrap();
    let out = ok(dir.path(), &["stats", "--train", "in.bio", "--format", "bio"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["total_entities"], 3);
}
