use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn unibrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unibrain")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

#[test]
fn help_exits_zero() {
    let o = unibrain(&["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("selfcheck"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = unibrain(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error code=USAGE_ERROR"), "{}", stderr(&o));
}

#[test]
fn invalid_thread_count_is_rejected() {
    for bad in ["0", "-2", "many"] {
        let o = Command::new(env!("CARGO_BIN_EXE_unibrain"))
            .args(["selfcheck"])
            .env("UNIBRAIN_THREADS", bad)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(1), "{bad}");
        assert!(stderr(&o).contains("error code=CONFIG_ERROR"), "{bad}: {}", stderr(&o));
    }
}

#[test]
fn selfcheck_passes_and_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("checks.json");
    let o = unibrain(&["selfcheck", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let results: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    let results = results.as_array().unwrap();
    assert!(!results.is_empty());
    assert!(results.iter().all(|r| r["passed"] == true));
}

#[test]
fn decompose_expands_signal_sentence_to_every_modality() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("structured.jsonl");
    let o = unibrain(&["--seed", "7", "decompose", "--in", fixture("ard_corpus.jsonl").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed: 7"));
    let text = std::fs::read_to_string(out).unwrap();
    let first = text.lines().next().unwrap();
    for m in ["T1WI hypointensity", "T2WI hyperintensity", "T2FLAIR hyperintensity", "DWI hyperintensity"] {
        assert!(first.contains(&format!("Patchy {m} on right lateral ventricle")), "{m}");
    }
}

#[test]
fn failed_run_leaves_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    let o = unibrain(&[
        "eval",
        "--checkpoint",
        dir.path().join("missing").to_str().unwrap(),
        "--in",
        fixture("ard_corpus.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error code="), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn missing_case_is_reported_by_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs":1,"batch_size":4}"#).unwrap();
    let d = data.to_str().unwrap();
    assert!(unibrain(&["synth", "--out", d, "--cases", "8"]).status.success());
    let corpus = data.join("corpus.jsonl");
    let lex = data.join("lexicon.json");
    let o = unibrain(&[
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--lexicon",
        lex.to_str().unwrap(),
        "--in",
        corpus.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("loss.csv").exists());
    let answer = dir.path().join("p.json");
    let o = unibrain(&[
        "infer",
        "--checkpoint",
        run.join("checkpoint").to_str().unwrap(),
        "--lexicon",
        lex.to_str().unwrap(),
        "--in",
        corpus.to_str().unwrap(),
        "--case",
        "no-such-case",
        "--out",
        answer.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error code=CASE_NOT_FOUND"), "{}", stderr(&o));
    assert!(!answer.exists());
}
