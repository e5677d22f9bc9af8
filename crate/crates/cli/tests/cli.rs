mod common;

use std::fs;
use std::path::Path;

use common::{gvr, gvr_ok, save, tree_bytes, write_tiny_config};

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo_file(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(name)).unwrap()
}

#[test]
fn selftest_exits_zero() {
    let out = gvr_ok(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains(" 0 failed"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn help_version_and_usage_errors() {
    assert_eq!(gvr(&["--help"]).status.code(), Some(0));
    assert_eq!(gvr(&["--version"]).status.code(), Some(0));
    assert_eq!(gvr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gvr(&["train", "--stage", "4", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn shipped_config_files_match_the_binary() {
    let default = gvr_ok(&["config", "default"]);
    assert_eq!(String::from_utf8(default.stdout).unwrap(), repo_file("config/default.json"));
    let schema = gvr_ok(&["config", "schema"]);
    assert_eq!(String::from_utf8(schema.stdout).unwrap(), repo_file("config/schema.json"));
}

#[test]
fn config_round_trip_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let first = String::from_utf8(gvr_ok(&["config", "default"]).stdout).unwrap();
    let path = dir.path().join("default.json");
    fs::write(&path, &first).unwrap();
    let p = path.to_str().unwrap();
    gvr_ok(&["config", "check", p]);
    let second = String::from_utf8(gvr_ok(&["--config", p, "config", "default"]).stdout).unwrap();
    assert_eq!(first, second);
}

fn config_error(json: &str) -> (Option<i32>, String) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, json).unwrap();
    let out = gvr(&["config", "check", path.to_str().unwrap()]);
    (out.status.code(), stderr(&out))
}

#[test]
fn config_errors_name_the_json_pointer() {
    let (code, msg) = config_error(r#"{"train": {"dataset": {"clip": 3}}}"#);
    assert_eq!(code, Some(1));
    assert!(msg.contains("/train/dataset/clip"), "{msg}");

    let (code, msg) = config_error(r#"{"train": {"lr": "fast"}}"#);
    assert_eq!(code, Some(1));
    assert!(msg.contains("/train/lr"), "{msg}");

    let (code, msg) = config_error(r#"{"attention": {"window": [4, 3, 2]}}"#);
    assert_eq!(code, Some(1));
    assert!(msg.contains("/attention/window"), "{msg}");

    let (code, msg) = config_error(r#"{"sdedit": {"alpha": 1.5}}"#);
    assert_eq!(code, Some(1));
    assert!(msg.contains("alpha"), "{msg}");

    let (code, _) = config_error("{not json");
    assert_eq!(code, Some(1));
}

#[test]
fn bench_rows_per_mode_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = out.to_str().unwrap();
    gvr_ok(&["bench", "attn", "--out", o, "--dim", "8", "--repetitions", "1"]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 3);
    gvr_ok(&["bench", "attn", "--modes", "full,sparse-local", "--sizes", "1x4x6,2x4x6,3x4x6", "--out", o]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1 + 3 * 2);
    let timed = dir.path().join("timed.csv");
    gvr_ok(&["bench", "attn", "--out", timed.to_str().unwrap(), "--dim", "8", "--wall-clock"]);
    assert!(fs::read_to_string(&timed).unwrap().lines().next().unwrap().contains("wall_ms"));
}

#[test]
fn later_stages_need_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("s2");
    let r = gvr(&["--config", cfg.to_str().unwrap(), "train", "--stage", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr(&r).contains("--resume"), "{}", stderr(&r));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.gvrm");
    let clip = save(&common::moving_square(5, 16, 16, 1), &dir.path().join("lr.y4m"));
    let out = dir.path().join("hr.y4m");
    let r = gvr(&["infer", "--model", missing.to_str().unwrap(), "--in", &clip, "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2), "{}", stderr(&r));
    let r = gvr(&["degrade", "flow", dir.path().join("absent.y4m").to_str().unwrap(), out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2), "{}", stderr(&r));
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.json");
    let tiny: serde_json::Value = serde_json::from_str(common::TINY_CONFIG).unwrap();
    let mut hot = tiny.clone();
    hot["train"]["lr"] = serde_json::json!(1e30);
    hot["train"]["optimizer"] = serde_json::json!("sgd");
    fs::write(&cfg, hot.to_string()).unwrap();
    let out = dir.path().join("run");
    let r = gvr(&["--config", cfg.to_str().unwrap(), "train", "--stage", "1", "--steps", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3), "{}", stderr(&r));
}

#[test]
fn curation_report_and_worker_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let clips = dir.path().join("clips");
    fs::create_dir_all(&clips).unwrap();
    save(&common::flat_clip(4, 16, 16, 0.0), &clips.join("a_black.y4m"));
    save(&common::flat_clip(4, 16, 16, 0.5), &clips.join("b_gray.y4m"));
    save(&common::checkerboard_clip(4, 16, 16, 2), &clips.join("c_checker.y4m"));
    fs::write(clips.join("d_broken.y4m"), b"not a clip").unwrap();
    let one = dir.path().join("one.csv");
    let four = dir.path().join("four.csv");
    gvr_ok(&["curate", clips.to_str().unwrap(), "--report", one.to_str().unwrap()]);
    gvr_ok(&["--workers", "4", "curate", clips.to_str().unwrap(), "--report", four.to_str().unwrap()]);
    let text = fs::read_to_string(&one).unwrap();
    assert_eq!(text, fs::read_to_string(&four).unwrap());
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("a_black.y4m") && rows[0].ends_with("brightness"), "{}", rows[0]);
    assert!(rows[1].ends_with("laplacian"), "{}", rows[1]);
    assert!(rows[2].contains("true"), "{}", rows[2]);
    assert!(rows[3].ends_with("unreadable"), "{}", rows[3]);
}

#[test]
fn pipeline_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    common::run_pipeline(&dir.path().join("a"), 1);
    common::run_pipeline(&dir.path().join("b"), 4);
    let a = tree_bytes(&dir.path().join("a/out"));
    let b = tree_bytes(&dir.path().join("b/out"));
    let names: Vec<String> = a.iter().map(|(p, _)| p.display().to_string()).collect();
    for expected in [
        "flow.y4m",
        "sdedit_toy.y4m",
        "sdedit_ckpt.y4m",
        "curation.csv",
        "stage1/model.gvrm",
        "stage1/loss.csv",
        "stage3/model.gvrm",
        "sampler/sampler.csv",
        "sampler/sampler.svg",
        "infer.y4m",
        "bench.csv",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected} in {names:?}");
    }
    assert_eq!(a.len(), b.len());
    for ((pa, ba), (pb, bb)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between 1 and 4 workers", pa.display());
    }
}

#[test]
fn stage_one_moving_average_loss_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    gvr_ok(&["train", "--stage", "1", "--steps", "50", "--out", out.to_str().unwrap()]);
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "loss").unwrap();
    let losses: Vec<f64> = lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 50);
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    // ma[j] averages steps j..j+10; keep the windows ending in the last half.
    let tail = &ma[25 - 9..];
    let rises: Vec<usize> = (1..tail.len()).filter(|&i| tail[i] >= tail[i - 1]).map(|i| i + 25).collect();
    assert!(rises.is_empty(), "moving average does not decrease at steps {rises:?}: {tail:?}");
}
