use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use echoloop::policy::Checkpoint;

fn echoloop(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echoloop"))
        .args(args)
        .env("ECHOLOOP_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn default_config(dir: &Path) -> String {
    let o = echoloop(&["default-config"], dir);
    assert!(o.status.success());
    let path = dir.join("c.toml");
    fs::write(&path, &o.stdout).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = echoloop(&["train", "--config", "/no/such/file.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"));
    let o = echoloop(&["train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config(dir.path());
    let o = echoloop(&["train", "--config", &cfg, "--set", "rewards.grounding.w_loc=0.9"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("invalid config"), "{}", stderr(&o));
}

#[test]
fn zero_iterations_leave_checkpoints_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config(dir.path());
    let out = dir.path().join("run");
    let o = echoloop(
        &["train", "--config", &cfg, "--iterations", "0", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let load = |name: &str| -> Checkpoint {
        serde_json::from_str(&fs::read_to_string(out.join(name)).unwrap()).unwrap()
    };
    let init = load("checkpoint_init.json");
    for name in ["checkpoint_phase0_grounding.json", "checkpoint_phase1_diagnosis.json"] {
        let ck = load(name);
        assert_eq!(ck.theta, init.theta);
        assert_eq!(ck.meta.trained_iterations, 0);
    }
    assert_eq!(fs::read_to_string(out.join("train_log.csv")).unwrap().lines().count(), 1);
    let canonical = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(canonical.contains("iterations = 0"));
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = echoloop(&["simulate-tool", "--profile", "sparse", "-n", "0"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("tool_stats_sparse.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(dir.path().join("config.toml").is_file());
}

#[test]
fn unknown_tool_profile_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = echoloop(&["simulate-tool", "--profile", "nope", "-n", "10"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown tool profile"));
}

#[test]
fn malformed_predictions_report_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.json");
    fs::write(
        &gt,
        r#"{"images":[{"id":1,"width":10,"height":10}],"annotations":[],"categories":[{"id":1,"name":"a"}]}"#,
    )
    .unwrap();
    let pred = dir.path().join("pred.jsonl");
    fs::write(&pred, "{\"image_id\":1,\"bbox\":null,\"label\":0}\n{oops\n").unwrap();
    let o = echoloop(
        &["eval", "--gt", gt.to_str().unwrap(), "--pred", pred.to_str().unwrap(), "--mode", "agent"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("pred.jsonl") && err.contains("line 2"), "{err}");
}

#[test]
fn untrained_checkpoint_is_rejected_by_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config(dir.path());
    let run = dir.path().join("run");
    let o = echoloop(
        &["train", "--config", &cfg, "--iterations", "2", "--out", run.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let init = run.join("checkpoint_init.json");
    let o = echoloop(
        &["ablate-detectors", "--config", &cfg, "--checkpoint", init.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("untrained"));

    let trained = run.join("checkpoint_phase1_diagnosis.json");
    let o = echoloop(
        &["ablate-detectors", "--config", &cfg, "--checkpoint", trained.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("ablate_detectors.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let (top1, agent, gain): (f64, f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap(), r[5].parse().unwrap());
        assert_eq!(gain, agent - top1);
    }
}

#[test]
fn report_summarizes_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config(dir.path());
    let o = echoloop(&["train", "--config", &cfg, "--iterations", "4"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = echoloop(&["report"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(report.contains("## Training curve") && report.contains("## heldout.csv"));

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(echoloop(&["report"], empty.path()).status.code(), Some(2));
}
