use std::path::Path;
use std::process::{Command, Output};

use regioncast::evalcli::{RunConfig, RunManifest};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regioncast")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = run(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

const TINY: &str = r#"{"model": {"embed_dim": 32, "depth": 1, "n_heads": 2},
  "pretrain": {"max_epochs": 1, "steps_per_epoch": 8, "max_val_windows": 4, "lead_times": [12, 24]},
  "finetune": {"max_epochs": 1, "steps_per_epoch": 4, "max_val_windows": 4, "lead_times": [24]},
  "eval": {"max_windows": 4}}"#;

/// Three-year dataset at 22.5° plus a pretrained run `base`.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("cfg.json"), TINY).unwrap();
    ok(&["gen-data", "--out", "data", "--resolution", "22.5", "--years", "3", "--seed", "2"], tmp.path());
    ok(&["pretrain", "--data", "data", "--config", "cfg.json", "--run-id", "base"], tmp.path());
    tmp
}

#[test]
fn usage_and_config_errors_exit_non_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (code, msg) = err(&["pretrain", "--data", "x", "--no-such-flag"], d);
    assert_eq!(code, 2);
    assert!(msg.contains("--no-such-flag"), "{msg}");
    assert_eq!(err(&["frobnicate"], d).0, 2);

    std::fs::write(d.join("bad.json"), r#"{"model": {"depth": 0}, "extra": true}"#).unwrap();
    let (code, msg) = err(&["pretrain", "--data", "x", "--config", "bad.json"], d);
    assert_eq!(code, 1);
    assert!(msg.contains("schema") && msg.contains("/model/depth") && msg.contains("extra"), "{msg}");
    std::fs::write(d.join("bad.json"), "{not json").unwrap();
    assert!(err(&["pretrain", "--data", "x", "--config", "bad.json"], d).1.contains("not JSON"));
    let (_, msg) = err(&["finetune", "--data", "x", "--base", "y", "--mode", "sgd"], d);
    assert!(msg.contains("sgd"), "{msg}");
}

#[test]
fn evaluate_without_a_checkpoint_is_a_clear_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (code, msg) = err(&["evaluate", "--data", "data"], d);
    assert_eq!(code, 1);
    assert!(msg.contains("needs a checkpoint"), "{msg}");
    std::fs::create_dir_all(d.join("runs/empty")).unwrap();
    std::fs::create_dir_all(d.join("data")).unwrap();
    let (_, msg) = err(&["evaluate", "--data", "data", "--checkpoint", "runs/empty"], d);
    assert!(msg.contains("no checkpoint found"), "{msg}");
}

#[test]
fn schema_command_prints_the_published_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["schema"], tmp.path());
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["title"], "regioncast run configuration");
    assert_eq!(text, regioncast::evalcli::RUN_CONFIG_SCHEMA);
}

#[test]
fn bench_attention_writes_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["bench-attention", "--sizes", "16,64", "--reps", "1", "--run-id", "b"], tmp.path());
    assert_eq!(out.lines().count(), 1 + 4);
    assert!(tmp.path().join("runs/b/bench.csv").is_file());
    assert!(tmp.path().join("runs/b/manifest.json").is_file());
}

#[test]
fn run_layout_manifest_and_replay() {
    let tmp = workspace();
    let d = tmp.path();
    let base = d.join("runs/base");
    for f in ["manifest.json", "metrics.json", "metrics.csv", "summary.json", "run.log", "checkpoints/model.ckpt", "maps/raw/manifest.json"] {
        assert!(base.join(f).is_file(), "missing {f}");
    }
    assert!(std::fs::read_dir(base.join("maps")).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "ppm")));
    let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(base.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.config_sha256, m.invocation.config_sha256().unwrap());
    assert_eq!(m.seed, 0);
    assert!(m.versions.contains_key("regioncast") && m.versions.contains_key("checkpoint_format"));
    assert!(m.inputs.keys().any(|k| k.starts_with("data:")));

    ok(&["evaluate", "--data", "data", "--checkpoint", "runs/base", "--region", "mena", "--leads", "12,24", "--config", "cfg.json", "--run-id", "e"], d);
    let csv = std::fs::read_to_string(d.join("runs/e/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "variable,lead_hours,rmse,acc,n_samples");
    assert_eq!(csv.lines().count(), 1 + 2 * 7);

    ok(&["replay", "--manifest", "runs/e/manifest.json", "--run-id", "e2"], d);
    assert_eq!(std::fs::read(d.join("runs/e/metrics.json")).unwrap(), std::fs::read(d.join("runs/e2/metrics.json")).unwrap());

    // changed inputs are refused unless explicitly allowed
    std::fs::copy(d.join("runs/base/checkpoints/model.ckpt"), d.join("saved.ckpt")).unwrap();
    ok(&["pretrain", "--data", "data", "--config", "cfg.json", "--seed", "9", "--run-id", "base"], d);
    let (_, msg) = err(&["replay", "--manifest", "runs/e/manifest.json", "--run-id", "e3"], d);
    assert!(msg.contains("changed"), "{msg}");
    ok(&["replay", "--manifest", "runs/e/manifest.json", "--run-id", "e3", "--allow-changed-inputs"], d);
}

#[test]
fn rank_sweep_report_has_one_row_per_rank() {
    let tmp = workspace();
    let d = tmp.path();
    for r in ["2", "4", "8", "16", "32"] {
        ok(
            &["finetune", "--data", "data", "--base", "runs/base", "--config", "cfg.json", "--mode", "lora", "--rank", r, "--targets", "attention", "--runs-dir", "sweep", "--run-id", &format!("r{r}")],
            d,
        );
    }
    let table = ok(&["report", "--runs", "sweep", "--run-id", "rep"], d);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 5);
    assert!(lines[0].starts_with("run,mode,rank,targets,region,lead_hours,trainable_params,total_params,peak_bytes,geopotential_500_rmse"));
    let ranks: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(ranks, ["2", "4", "8", "16", "32"]);
    let trainable: Vec<usize> = lines[1..].iter().map(|l| l.split(',').nth(6).unwrap().parse().unwrap()).collect();
    assert!(trainable.windows(2).all(|w| w[0] < w[1]));
    for f in ["report.json", "report_long.csv", "report_table.csv"] {
        assert!(d.join("runs/rep").join(f).is_file());
    }
    // default regime: LoRA r16 on attention, 72h lead
    let cfg = RunConfig::default();
    assert_eq!((cfg.finetune.mode.to_string(), cfg.finetune.peft.rank, cfg.finetune.peft.targets.to_string()), ("lora".into(), 16, "attention".into()));
    assert_eq!(cfg.finetune.lead_times, vec![72]);
}
