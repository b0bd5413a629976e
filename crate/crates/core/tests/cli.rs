use std::fs;
use std::path::Path;

use serde_json::Value;
use shardtrain::cli::{run, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK};

const SMALL: &str = r#"{
  "width_divisor": 28,
  "head_dims": [8],
  "world_size": 2,
  "batch_per_rank": 3,
  "total_iters": 6,
  "swav": {"n_prototypes": 6},
  "dataset": {"dim": 10, "n_samples": 64},
  "optim": {"warmup_iters": 2}
}"#;

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["shardtrain"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn widths_for_named_model() {
    let (code, out, _) = call(&["widths", "--model", "rg-128gf"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out, "stage,width,depth\n1,528,2\n2,1056,7\n3,2904,17\n4,7392,1\n");
}

#[test]
fn plan_from_file() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write(tmp.path(), "plan.json", r#"{"m": [4, 4, 4, 4, 4, 4], "n_segments": 3}"#);
    let (code, out, _) = call(&["plan", "--input", &input]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["boundaries"], serde_json::json!([2, 4]));
    assert_eq!(v["minimax_sum"], 8);
}

#[test]
fn simulate_schedule_hand_case() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write(tmp.path(), "s.json", r#"{"comm": [1, 1, 1], "compute": [2, 2, 2]}"#);
    let (code, out, _) = call(&["simulate-schedule", "--input", &input]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!((v["serial_makespan"].as_f64(), v["prefetch_makespan"].as_f64()), (Some(9.0), Some(7.0)));
}

#[test]
fn train_reshard_probe_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write(dir, "run.json", SMALL);
    let slices = dir.join("slices");
    let events = dir.join("events.jsonl");
    let (code, out, err) = call(&[
        "train",
        "--config",
        &cfg,
        "--events",
        events.to_str().unwrap(),
        "--save-slices",
        slices.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0]["iter"], 0);
    assert!(lines.iter().all(|l| l["loss"].as_f64().unwrap().is_finite()));
    assert!(fs::read_to_string(&events).unwrap().lines().count() > 0);

    // same config, same bytes
    let (_, again, _) = call(&["train", "--config", &cfg]);
    assert_eq!(again, out);

    let shards = dir.join("shards");
    let (code, _, err) = call(&[
        "reshard",
        "--in",
        slices.to_str().unwrap(),
        "--out",
        shards.to_str().unwrap(),
        "--mode",
        "to-shards",
        "--world",
        "3",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(shardtrain::ckptstore::read_metadata(&shards).unwrap().world_size, 3);

    let (code, out, err) = call(&["probe", "--config", &cfg, "--slices", slices.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let top1 = v["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(v["n_test"], 13);
}

#[test]
fn resume_through_cli_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ck = dir.join("ck");
    let text = SMALL.replacen('{', &format!("{{\"checkpoint_every\": 3, \"checkpoint_dir\": {:?},", ck.to_str().unwrap()), 1);
    let cfg = write(dir, "run.json", &text);
    let (code, full, err) = call(&["train", "--config", &cfg]);
    assert_eq!(code, EXIT_OK, "{err}");
    let resume = ck.join("step_000003");
    let (code, tail, err) = call(&["train", "--config", &cfg, "--resume", resume.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    let full: Vec<&str> = full.lines().collect();
    assert_eq!(tail.lines().collect::<Vec<_>>(), full[3..]);
}

#[test]
fn config_errors_exit_two_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", "{\n  \"world_size\": 2,\n  \"batch_per_rnk\": 3\n}");
    let (code, _, err) = call(&["train", "--config", &cfg]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("line 3"), "{err}");
    assert_eq!(call(&["reshard", "--in", "a", "--out", "b", "--mode", "to-shards"]).0, EXIT_CONFIG);
    assert_eq!(call(&["widths", "--model", "rg-3gf"]).0, EXIT_CONFIG);
}

#[test]
fn divergence_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace(
        r#""optim": {"warmup_iters": 2}"#,
        r#""optim": {"warmup_iters": 2, "base_lr": 1e300, "peak_lr": 1e300, "final_lr": 1e300, "larc": null}"#,
    );
    let cfg = write(tmp.path(), "run.json", &text);
    let (code, _, err) = call(&["train", "--config", &cfg]);
    assert_eq!(code, EXIT_NUMERIC, "{err}");
}

#[test]
fn missing_checkpoint_exits_four() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.json", SMALL);
    let missing = tmp.path().join("nothing");
    let (code, _, _) = call(&["train", "--config", &cfg, "--resume", missing.to_str().unwrap()]);
    assert_eq!(code, EXIT_IO);
    let (code, _, _) = call(&["reshard", "--in", missing.to_str().unwrap(), "--out", "x", "--mode", "to-slices"]);
    assert_eq!(code, EXIT_IO);
}
