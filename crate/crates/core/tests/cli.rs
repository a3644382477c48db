mod common;

use std::path::Path;
use std::process::{Command, Output};

use pocketrl::runner::{Checkpoint, ExportedPolicy};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pocketrl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

fn write_config(dir: &Path, algo: &str, out: &Path) -> String {
    let text = format!(
        r#"{{
  "env": {{"name": "point_mass", "num_envs": 8}},
  "algo": {algo},
  "network": {{"hidden_sizes": [16]}},
  "seed": 3,
  "max_iterations": 2,
  "out_dir": "{}",
  "record_timing": false
}}"#,
        out.display()
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const PPO: &str = r#"{"ppo": {"rollout_horizon": 8}}"#;

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_exits_2() {
    let o = run(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_of_missing_file_exits_1_naming_the_path() {
    let o = run(&["eval", "--checkpoint", "/no/such/file.ckpt", "--episodes", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/file.ckpt"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"ppo": {"gamma": 1.5}}"#, &dir.path().join("run"));
    let o = run(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_fault() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    std::fs::write(&p, b"NOTACKPTxxxxxxxx").unwrap();
    let o = run(&["eval", "--checkpoint", p.to_str().unwrap(), "--episodes", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), PPO, &out);
    let o = run(&["train", "--config", &cfg, "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    let ckpt = summary["checkpoint"].as_str().unwrap().to_owned();
    assert_eq!(Checkpoint::load(Path::new(&ckpt)).unwrap().config.seed, 5);
    let lines = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    for line in lines.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert_eq!(lines.lines().count(), 2);

    let e1 = run(&["eval", "--checkpoint", &ckpt, "--episodes", "4", "--deterministic"]);
    let e2 = run(&["eval", "--checkpoint", &ckpt, "--episodes", "4", "--deterministic"]);
    assert!(e1.status.success());
    assert_eq!(e1.stdout, e2.stdout);
    assert_eq!(stdout_json(&e1)["episodes"], 4);
    assert_eq!(run(&["eval", "--checkpoint", &ckpt, "--episodes", "0"]).status.code(), Some(2));

    let pol = dir.path().join("policy.bin");
    let x = run(&["export", "--checkpoint", &ckpt, "--out", pol.to_str().unwrap()]);
    assert!(x.status.success());
    let exported = ExportedPolicy::load(&pol).unwrap();
    assert_eq!(exported.action_dim(), 1);
    assert!(std::fs::metadata(&pol).unwrap().len() < std::fs::metadata(&ckpt).unwrap().len());
}

#[test]
fn distill_with_lqr_expert_and_with_teacher_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let cfg = write_config(dir.path(), PPO, &teacher_dir);
    assert!(run(&["train", "--config", &cfg]).status.success());
    let teacher = teacher_dir.join("final.ckpt");

    let out = dir.path().join("student");
    let cfg = write_config(dir.path(), r#"{"distill": {"rollout_horizon": 8}}"#, &out);
    let o = run(&["distill", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["distill", "--config", &cfg, "--teacher", teacher.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(m.lines().next().unwrap()).unwrap();
    assert!(first["distill_loss"].is_number());
}

#[test]
fn two_worker_training_launched_as_two_processes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), PPO, &out);
    let addr = common::free_addr();
    let spawn = |rank: &str, out_dir: &Path| {
        bin()
            .args(["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()])
            .args(["--workers", "2", "--rank", rank, "--coordinator", &addr])
            .output()
    };
    let out1 = dir.path().join("rank1");
    let (r0, r1) = std::thread::scope(|s| {
        let h0 = s.spawn(|| spawn("0", &out));
        let h1 = s.spawn(|| spawn("1", &out1));
        (h0.join().unwrap().unwrap(), h1.join().unwrap().unwrap())
    });
    assert!(r0.status.success(), "{}", String::from_utf8_lossy(&r0.stderr));
    assert!(r1.status.success(), "{}", String::from_utf8_lossy(&r1.stderr));
    assert!(out.join("final.ckpt").exists());
    assert!(!out1.exists());
    assert!(stdout_json(&r1)["checkpoint"].is_null());
    let ckpt = Checkpoint::load(&out.join("final.ckpt")).unwrap();
    assert_eq!(ckpt.total_env_steps, 2 * 2 * 8 * 8);
}
