use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[corpus]
n_max = 64
m_max = 24

[ntm]
hidden = 32
topics = 5

[summarizer]
layers_enc = 1
layers_dec = 1
model_dim = 16
heads = 2
ffn_dim = 32

[training]
pretrain_epochs = 2
max_steps = 20
eval_interval = 10
eval_rouge = false

[eval]
beam = 2
"#;

fn topicflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topicflow"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TOPICFLOW_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = topicflow(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn mini() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/mini").to_string_lossy().into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn training_twice_with_the_same_seed_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = mini();
    let mut csvs = Vec::new();
    for out in ["a", "b"] {
        let common = ["--config", &cfg, "--seed", "7", "--data-dir", &data, "--out-dir", out];
        ok(&[&["build-vocab"][..], &common].concat(), dir.path());
        ok(&[&["train"][..], &common].concat(), dir.path());
        csvs.push(std::fs::read(dir.path().join(out).join("metrics.csv")).unwrap());
    }
    assert!(!csvs[0].is_empty());
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn small_pipeline_produces_summaries_and_topics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = mini();
    let common = ["--config", &cfg, "--data-dir", &data, "--out-dir", "out"];
    for step in ["build-vocab", "pretrain-ntm", "train", "summarize"] {
        ok(&[&[step][..], &common].concat(), dir.path());
    }
    let summaries = std::fs::read_to_string(dir.path().join("out/summaries.jsonl")).unwrap();
    assert_eq!(summaries.lines().count(), 20);
    for line in summaries.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["id"].is_string() && v["summary"].is_string());
    }
    let topics: serde_json::Value =
        serde_json::from_str(&ok(&[&["topics", "--k", "10"][..], &common].concat(), dir.path())).unwrap();
    let topics = topics["topics"].as_array().unwrap();
    assert_eq!(topics.len(), 5);
    assert!(topics.iter().all(|t| t["top_words"].as_array().unwrap().len() == 10));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["lambda_ntm"], 0.75);
}

#[test]
fn evaluating_references_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.jsonl");
    std::fs::write(
        &refs,
        "{\"id\": \"a\", \"document\": \"x y\", \"summary\": \"the cat sat\"}\n\
         {\"id\": \"b\", \"document\": \"x y\", \"summary\": \"storm warning issued\"}\n",
    )
    .unwrap();
    let outputs = dir.path().join("out.jsonl");
    std::fs::write(
        &outputs,
        "{\"id\": \"a\", \"summary\": \"the cat sat\"}\n{\"id\": \"b\", \"summary\": \"storm warning issued\"}\n",
    )
    .unwrap();
    let stdout = ok(
        &["eval", "--outputs", outputs.to_str().unwrap(), "--refs", refs.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(stdout.lines().next().unwrap(), "100.00/100.00/100.00");
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(topicflow(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(topicflow(&["stats", "--beam", "wide"], dir.path()).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "[training]\nbogus = 1\n").unwrap();
    assert_eq!(topicflow(&["stats", "--config", "bad.toml"], dir.path()).status.code(), Some(1));
    assert_eq!(topicflow(&["stats", "--data", "missing.jsonl"], dir.path()).status.code(), Some(2));
    assert_eq!(topicflow(&["stats", "--data", &format!("{}/train.jsonl", mini())], dir.path()).status.code(), Some(0));
}

#[test]
fn help_documents_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&["train", "--help"], dir.path());
    for needle in ["--lambda-ntm", "training.lambda_ntm, default: 0.75", "--flow-length", "--config"] {
        assert!(help.contains(needle), "missing {needle}");
    }
}
