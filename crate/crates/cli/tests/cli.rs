use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seed = 3
total_steps = 2
batch_size = 2
checkpoint_every = 1

[policy]
vocab_size = 64
d_model = 8
n_layers = 1
n_heads = 2
window = 128
"#;

fn foldact(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_foldact"));
    cmd.args(args).env_remove("FOLDACT_SEED");
    if let Some(s) = seed {
        cmd.env("FOLDACT_SEED", s);
    }
    cmd.output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn error_record(o: &Output) -> Value {
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str::<Value>(line).unwrap()["error"].clone()
}

fn train(dir: &Path, seed: Option<&str>) -> Output {
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.join("run");
    foldact(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], seed)
}

#[test]
fn train_writes_the_run_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let v = stdout_json(&train(tmp.path(), None));
    assert_eq!(v["completed_steps"], 2);
    let run = tmp.path().join("run");
    for f in ["manifest", "config", "metrics.csv", "checkpoints/step-000002.foldact-ckpt", "trajectories/step-000001.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(fs::read_dir(run.join("report")).unwrap().count() >= 3);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["finished_at"].is_u64());
}

#[test]
fn seed_variable_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    stdout_json(&train(tmp.path(), Some("41")));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("run/manifest")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 41);
    assert!(fs::read_to_string(tmp.path().join("run/config")).unwrap().contains("seed = 41"));
}

#[test]
fn bad_seed_variable_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let e = error_record(&train(tmp.path(), Some("minus one")));
    assert_eq!(e["kind"], "config");
    assert_eq!(e["key"], "FOLDACT_SEED");
}

#[test]
fn unknown_config_key_names_the_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "pdrop = 0.3\n").unwrap();
    let o = foldact(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let e = error_record(&o);
    assert_eq!(e["kind"], "config");
    assert_eq!(e["key"], "pdrop");
    assert!(e["message"].as_str().unwrap().contains("p_drop"));
}

#[test]
fn usage_errors_exit_two_with_a_record() {
    let o = foldact(&["train"], None);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["kind"], "usage");
    assert!(foldact(&["--help"], None).status.success());
}

#[test]
fn eval_rollout_and_report_use_a_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    stdout_json(&train(tmp.path(), None));
    let run = tmp.path().join("run");
    let ckpt = run.join("checkpoints/step-000002.foldact-ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let v = stdout_json(&foldact(&["eval", "--ckpt", ckpt, "--episodes", "4"], None));
    assert_eq!(v["summary"]["episodes"], 4);
    let rate = v["summary"]["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));

    let tasks = tmp.path().join("tasks.jsonl");
    fs::write(&tasks, "{\"schema\":\"foldact.tasks/1\"}\n{\"seed\":1}\n{\"seed\":2}\n{\"seed\":3}\n").unwrap();
    let o = foldact(&["rollout", "--ckpt", ckpt, "--tasks", tasks.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["count"], 3);
    assert_eq!(text.lines().count(), 4);

    let out = tmp.path().join("tables");
    let v = stdout_json(&foldact(&["report", "--run", run.to_str().unwrap(), "--out", out.to_str().unwrap()], None));
    assert!(v["files"].as_array().unwrap().len() >= 3);
    for f in fs::read_dir(&out).unwrap() {
        let text = fs::read_to_string(f.unwrap().path()).unwrap();
        assert!(text.starts_with("# schema: "));
    }
}

#[test]
fn report_rejects_corrupted_and_missing_runs() {
    let tmp = tempfile::tempdir().unwrap();
    stdout_json(&train(tmp.path(), None));
    let run = tmp.path().join("run");
    let metrics = run.join("metrics.csv");
    let mut bytes = fs::read(&metrics).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 1;
    fs::write(&metrics, bytes).unwrap();
    let e = error_record(&foldact(&["report", "--run", run.to_str().unwrap()], None));
    assert_eq!(e["kind"], "format");
    let e = error_record(&foldact(&["report", "--run", tmp.path().join("nothing").to_str().unwrap()], None));
    assert_eq!(e["kind"], "missing_artifacts");
}

#[test]
fn missing_checkpoint_is_reported() {
    let e = error_record(&foldact(&["eval", "--ckpt", "/nonexistent/step-000000.foldact-ckpt"], None));
    assert_eq!(e["kind"], "missing_artifacts");
}
