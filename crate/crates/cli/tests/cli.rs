use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn icct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icct"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const TINY: &str = r#"{
    "env": "plateau",
    "model": {"kind": "icct", "leaves": 2, "e": 1},
    "trainer": {"total_steps": 150, "warmup_steps": 100, "batch_size": 8, "critic_hidden": [8]},
    "seeds": [3],
    "eval": {"episodes": 2}
}"#;

#[test]
fn missing_env_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "{}");
    let out = icct(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("env: unknown ''"));
}

#[test]
fn bad_usage_and_missing_files_exit_with_one() {
    assert_eq!(icct(&["train"]).status.code(), Some(1));
    assert_eq!(
        icct(&["train", "--config", "/nonexistent/cfg.json"]).status.code(),
        Some(1)
    );
}

#[test]
fn unreadable_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("ckpt_0.json");
    fs::write(&ckpt, "{\"kind\": \"icct\"}").unwrap();
    let out = icct(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--env", "plateau"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_export_verify_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let runs = tmp.path().join("runs");
    let out = icct(&["train", "--config", &cfg, "--out", runs.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let seed_dir = runs.join("plateau-icct-e1-d1").join("seed_3");
    for f in [
        "ckpt_0.json",
        "ckpt_150.json",
        "metrics.csv",
        "tree.txt",
        "tree.dot",
        "eval.json",
    ] {
        assert!(seed_dir.join(f).exists(), "{f}");
    }
    let ckpt = seed_dir.join("ckpt_150.json");
    let ckpt = ckpt.to_str().unwrap();

    let out = icct(&[
        "eval",
        "--checkpoint",
        ckpt,
        "--config",
        &cfg,
        "--episodes",
        "1",
        "--seed",
        "4",
    ]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["episodes"], 1);
    assert!(summary["max_crisp_deviation"].as_f64().unwrap() <= 1e-9);
    let again = icct(&[
        "eval",
        "--checkpoint",
        ckpt,
        "--config",
        &cfg,
        "--episodes",
        "1",
        "--seed",
        "4",
    ]);
    assert_eq!(out.stdout, again.stdout);

    let export = tmp.path().join("export");
    let out = icct(&[
        "export",
        "--checkpoint",
        ckpt,
        "--env",
        "plateau",
        "--out",
        export.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(fs::read_to_string(export.join("tree.dot"))
        .unwrap()
        .starts_with("digraph"));

    let prop = tmp.path().join("prop.json");
    fs::write(&prop, r#"{"domain": {"x": [-1, 1]}, "limits": [[-1, 1]]}"#).unwrap();
    let out = icct(&[
        "verify",
        "--checkpoint",
        ckpt,
        "--env",
        "plateau",
        "--property",
        prop.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));

    fs::write(&prop, r#"{"domain": {"speed": [0, 1]}, "limits": [[-1, 1]]}"#).unwrap();
    let out = icct(&[
        "verify",
        "--checkpoint",
        ckpt,
        "--env",
        "plateau",
        "--property",
        prop.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_a_pareto_table() {
    let tmp = tempfile::tempdir().unwrap();
    let body = TINY.replace(
        "\"seeds\": [3],",
        "\"seeds\": [3], \"sweep\": {\"axis\": \"leaves\", \"values\": [2, 4]},",
    );
    let cfg = write_config(tmp.path(), &body);
    let runs = tmp.path().join("runs");
    let out = icct(&["sweep", "--config", &cfg, "--out", runs.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(runs.join("plateau-icct-e1-d1").join("pareto.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("axis,value,mean_return,stderr,active_params,frontier")
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn deepen_writes_a_growth_log() {
    let tmp = tempfile::tempdir().unwrap();
    let body = TINY.replace(
        "\"seeds\": [3],",
        "\"seeds\": [3], \"deepen\": {\"epochs\": 2, \"steps_per_epoch\": 60, \"imitation_steps\": 5, \"eval_episodes\": 1},",
    );
    let cfg = write_config(tmp.path(), &body);
    let runs = tmp.path().join("runs");
    let out = icct(&["deepen", "--config", &cfg, "--out", runs.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(runs.join("plateau-icct-e1-d1").join("seed_3").join("growth.csv")).unwrap();
    assert!(log.starts_with("epoch,depth,H,H_deep,swapped"));
    assert_eq!(log.lines().count(), 3);
}
