use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pointlang"));
    c.env("POINTLANG_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn train_tiny(run_dir: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--preset", "tiny", "--run-dir", run_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args);
}

#[test]
fn init_config_round_trips_through_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    run(&["init-config", "--preset", "tiny", "--out", cfg.to_str().unwrap()]);
    let rd = dir.path().join("run");
    run(&["train", "--config", cfg.to_str().unwrap(), "--stage", "1", "--run-dir", rd.to_str().unwrap()]);
    for f in ["config.json", "train_log.csv", "checkpoints/stage1.ckpt", "checkpoints/final.ckpt"] {
        assert!(rd.join(f).exists(), "{f}");
    }
    assert!(!rd.join("run.lock").exists());
    let log = std::fs::read_to_string(rd.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,stage,lr,ntp_loss,vq_loss,total_loss,mean_reward,mean_abs_advantage,codebook_utilization\n"));
}

#[test]
fn schema_lists_top_level_sections() {
    let out = run(&["init-config", "--schema"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    for k in ["geometry", "tokenizer", "lm", "stages", "reward", "data", "optimizer", "eval"] {
        assert!(v["properties"].get(k).is_some(), "{k}");
    }
}

#[test]
fn bad_config_names_the_pointer_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"tokenizer": {"codebook_size": "many"}}"#).unwrap();
    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--run-dir"])
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/tokenizer/codebook_size"), "{err}");
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.lock"), "1").unwrap();
    let out = bin()
        .args(["train", "--preset", "tiny", "--run-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn paused_training_resumes_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_tiny(&a, &["--stage", "1"]);
    train_tiny(&a, &["--stage", "2", "--resume"]);
    train_tiny(&b, &["--stage", "1"]);
    train_tiny(&b, &["--stage", "2", "--stop-after", "1", "--resume"]);
    assert!(b.join("checkpoints/latest.ckpt").exists());
    train_tiny(&b, &["--stage", "2", "--resume"]);
    let fa = std::fs::read(a.join("checkpoints/final.ckpt")).unwrap();
    let fb = std::fs::read(b.join("checkpoints/final.ckpt")).unwrap();
    assert!(fa == fb, "resumed checkpoint differs");
}

#[test]
fn data_caption_tokenize_eval_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["gen-data", "--preset", "tiny", "--out", data.to_str().unwrap(), "--materialize"]);
    let train = std::fs::read_to_string(data.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 48);
    assert!(data.join("clouds/test_00000.spc1").exists());

    let rd = dir.path().join("run");
    train_tiny(&rd, &["--stage", "1", "--data", data.to_str().unwrap()]);
    let ckpt = rd.join("checkpoints/final.ckpt");
    let ck = ckpt.to_str().unwrap();
    let cloud = data.join("clouds/test_00000.spc1");

    let cap = stdout(&run(&["caption", "--cloud", cloud.to_str().unwrap(), "--ckpt", ck]));
    assert_eq!(cap.lines().count(), 1);

    let toks = stdout(&run(&["tokenize", "--ckpt", ck, "--cloud", cloud.to_str().unwrap(), "shape:cube/red/1/64/0/1"]));
    let lines: Vec<serde_json::Value> = toks.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["indices"].as_array().unwrap().len(), 8);

    let report = dir.path().join("eval.json");
    let out = run(&["eval", "--ckpt", ck, "--data", data.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["count"], 16);
    let full: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(full["per_sample"].as_array().unwrap().len(), 16);

    let sweep = dir.path().join("sweep");
    run(&["sweep-resolution", "--ckpt", ck, "--limit", "4", "--out-dir", sweep.to_str().unwrap()]);
    let csv = std::fs::read_to_string(sweep.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(sweep.join("bench.svg").exists());

    let out = run(&["bench", "--ckpt", ck, "--resolution", "32,64", "--iters", "1", "--warmup", "0", "--clouds", "2", "--gen-tokens", "2"]);
    assert_eq!(stdout(&out).lines().count(), 2);
}

#[test]
fn grad_check_command_passes() {
    let out = run(&["grad-check", "--points", "16"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn ablate_writes_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let rd = dir.path().join("abl");
    let out = run(&["ablate", "--preset", "tiny", "--axis", "pooling", "--values", "max,mean", "--limit", "4", "--run-dir", rd.to_str().unwrap()]);
    assert_eq!(stdout(&out).lines().count(), 2);
    for v in ["max", "mean"] {
        assert!(rd.join(format!("pooling={v}/reports/eval_test.json")).exists());
    }
    let csv = std::fs::read_to_string(rd.join("ablation_pooling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
