#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gvr_core::media::{write_clip, Clip};
use gvr_core::Tensor;

pub fn gvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gvr"))
        .args(args)
        .output()
        .expect("spawn gvr")
}

pub fn gvr_ok(args: &[&str]) -> Output {
    let out = gvr(args);
    assert!(
        out.status.success(),
        "gvr {args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small model and data sizes so every command finishes in seconds.
pub const TINY_CONFIG: &str = r#"{
  "sdedit": { "steps": 2 },
  "model": { "width": 16, "heads": 2, "depth": 2 },
  "train": {
    "batch": 2,
    "stage_steps": [3, 2, 2],
    "dataset": { "clips": 4, "frames": 5, "height": 64, "width": 64, "seed": 5 },
    "long_frames": 9
  },
  "sampler": { "traces": 2, "steps": 4 },
  "attention": { "window": [2, 2], "temporal": { "unit": 2, "shift": 1 } }
}"#;

pub fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY_CONFIG).unwrap();
    path
}

/// Textured background with a checkered square moving `step` pixels per frame.
pub fn moving_square(t: usize, h: usize, w: usize, step: usize) -> Clip {
    let frames: Vec<Tensor> = (0..t)
        .map(|f| {
            let x0 = 4 + f * step;
            Tensor::from_fn(vec![h, w, 3], |i| {
                let (p, c) = (i / 3, i % 3);
                let (y, x) = ((p / w) as f32, (p % w) as f32);
                let inside = (h / 4..h / 4 + h / 2).contains(&(p / w)) && (x0..x0 + w / 3).contains(&(p % w));
                if inside {
                    if ((p % w) / 2 + (p / w) / 2) % 2 == 0 {
                        0.9 - 0.1 * c as f32
                    } else {
                        0.1 + 0.1 * c as f32
                    }
                } else {
                    0.5 + 0.15 * (0.4 * x + c as f32).sin() * (0.3 * y).cos()
                }
            })
        })
        .collect();
    Clip::from_frames(&frames, 24.0).unwrap()
}

pub fn flat_clip(t: usize, h: usize, w: usize, v: f32) -> Clip {
    Clip::new(Tensor::full(vec![t, h, w, 3], v), 24.0).unwrap()
}

pub fn checkerboard_clip(t: usize, h: usize, w: usize, cell: usize) -> Clip {
    Clip::new(
        Tensor::from_fn(vec![t, h, w, 3], |i| {
            let p = (i / 3) % (h * w);
            if ((p / w) / cell + (p % w) / cell) % 2 == 0 {
                1.0
            } else {
                0.0
            }
        }),
        24.0,
    )
    .unwrap()
}

pub fn save(clip: &Clip, path: &Path) -> String {
    write_clip(clip, path).unwrap();
    path.to_str().unwrap().to_string()
}

/// Every file under `dir`, relative path and bytes, sorted by path.
pub fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every pipeline command on fixed inputs with `workers` threads and
/// writes all outputs under `root`.
pub fn run_pipeline(root: &Path, workers: usize) {
    let w = workers.to_string();
    let inputs = root.join("inputs");
    let out = root.join("out");
    fs::create_dir_all(&inputs).unwrap();
    let cfg = write_tiny_config(root);
    let cfg = cfg.to_str().unwrap();
    let hr = save(&moving_square(5, 32, 32, 3), &inputs.join("hr.y4m"));
    let lr = save(&moving_square(5, 16, 16, 2), &inputs.join("lr.y4m"));
    let curate_dir = inputs.join("curate");
    fs::create_dir_all(&curate_dir).unwrap();
    save(&flat_clip(3, 16, 16, 0.0), &curate_dir.join("black.y4m"));
    save(&flat_clip(3, 16, 16, 0.5), &curate_dir.join("gray.y4m"));
    save(&checkerboard_clip(3, 16, 16, 2), &curate_dir.join("checker.y4m"));
    save(&moving_square(5, 32, 32, 3), &curate_dir.join("square.y4m"));
    let o = |name: &str| out.join(name).to_str().unwrap().to_string();
    let base = ["--config", cfg, "--workers", w.as_str()];
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = base.to_vec();
        all.extend_from_slice(args);
        gvr_ok(&all);
    };
    run(&["degrade", "flow", &hr, &o("flow.y4m"), "--seed", "3"]);
    run(&["degrade", "sdedit", &hr, &o("sdedit_toy.y4m"), "--seed", "3"]);
    run(&["curate", curate_dir.to_str().unwrap(), "--report", &o("curation.csv")]);
    run(&["train", "--stage", "1", "--out", &o("stage1")]);
    let ckpt1 = o("stage1/model.gvrm");
    run(&["train", "--stage", "2", "--resume", &ckpt1, "--out", &o("stage2")]);
    run(&["train", "--stage", "3", "--resume", &o("stage2/model.gvrm"), "--out", &o("stage3")]);
    run(&["degrade", "sdedit", &hr, &o("sdedit_ckpt.y4m"), "--model", &ckpt1, "--seed", "3"]);
    run(&["sampler", "build", "--model", &ckpt1, "--out", &o("sampler")]);
    run(&["infer", "--model", &ckpt1, "--in", &lr, "--out", &o("infer.y4m"), "--steps", "4", "--seed", "2"]);
    run(&["bench", "attn", "--out", &o("bench.csv"), "--dim", "8", "--repetitions", "1"]);
}
