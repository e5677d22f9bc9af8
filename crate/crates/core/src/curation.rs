//! Clip screening by brightness, spatial detail and an optional external
//! perceptual-quality scorer.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{read_clip, Clip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub frames: usize,
    pub brightness_min: f64,
    pub brightness_max: f64,
    /// On the 0-255 luma scale.
    pub laplacian_min: f64,
    pub musiq_min: f64,
    /// Scorer program and leading arguments; the clip path is appended and a
    /// single float is read from stdout. Absent disables the filter.
    pub musiq_command: Option<Vec<String>>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            frames: 10,
            brightness_min: 0.08,
            brightness_max: 0.92,
            laplacian_min: 30.0,
            musiq_min: 40.0,
            musiq_command: None,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("curation", "frames must be >= 1"));
        }
        if !(0.0 <= self.brightness_min && self.brightness_min < self.brightness_max && self.brightness_max <= 1.0) {
            return Err(Error::invalid("curation", "need 0 <= brightness_min < brightness_max <= 1"));
        }
        if matches!(&self.musiq_command, Some(c) if c.is_empty()) {
            return Err(Error::invalid("curation", "musiq_command must name a program"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationVerdict {
    pub clip_id: String,
    pub brightness: f64,
    pub laplacian_var: f64,
    pub musiq: Option<f64>,
    pub accepted: bool,
    pub reason: Option<String>,
}

impl CurationVerdict {
    fn unreadable(clip_id: &str) -> Self {
        Self {
            clip_id: clip_id.to_string(),
            brightness: f64::NAN,
            laplacian_var: f64::NAN,
            musiq: None,
            accepted: false,
            reason: Some("unreadable".to_string()),
        }
    }
}

/// `n` frame indices spread evenly over `0..len`; every frame when shorter.
pub fn sample_indices(len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .map(|i| ((i * (len - 1)) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Rec.601 luma in [0, 1] of frame `t`.
pub fn frame_luma(clip: &Clip, t: usize) -> Vec<f64> {
    clip.frame(t)
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Variance of the 4-neighbor Laplacian over interior pixels.
pub fn laplacian_variance(luma: &[f64], h: usize, w: usize) -> f64 {
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut resp = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            resp.push(luma[i - w] + luma[i + w] + luma[i - 1] + luma[i + 1] - 4.0 * luma[i]);
        }
    }
    let n = resp.len() as f64;
    let mean = resp.iter().sum::<f64>() / n;
    resp.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n
}

/// Mean brightness and mean Laplacian variance (0-255 scale) over the
/// sampled frames.
pub fn clip_statistics(clip: &Clip, frames: usize) -> (f64, f64) {
    let idx = sample_indices(clip.len(), frames);
    let (h, w) = (clip.height(), clip.width());
    let (mut bright, mut lap) = (0.0, 0.0);
    for &t in &idx {
        let l = frame_luma(clip, t);
        bright += l.iter().sum::<f64>() / l.len() as f64;
        let scaled: Vec<f64> = l.iter().map(|v| v * 255.0).collect();
        lap += laplacian_variance(&scaled, h, w);
    }
    (bright / idx.len() as f64, lap / idx.len() as f64)
}

fn run_scorer(command: &[String], path: &Path) -> Result<f64> {
    let out = Command::new(&command[0])
        .args(&command[1..])
        .arg(path)
        .output()
        .map_err(|e| Error::io(format!("spawning {}", command[0]), e))?;
    if !out.status.success() {
        return Err(Error::invalid("musiq", format!("scorer exited with {}", out.status)));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    text.trim()
        .parse::<f64>()
        .map_err(|_| Error::format("musiq", format!("scorer printed {:?}, expected a number", text.trim())))
}

/// Screens an in-memory clip. `path` is only handed to the external scorer.
pub fn curate_clip(clip_id: &str, clip: &Clip, path: Option<&Path>, config: &CurationConfig) -> Result<CurationVerdict> {
    config.validate()?;
    let (brightness, laplacian_var) = clip_statistics(clip, config.frames);
    let mut verdict = CurationVerdict {
        clip_id: clip_id.to_string(),
        brightness,
        laplacian_var,
        musiq: None,
        accepted: true,
        reason: None,
    };
    let reject = |v: &mut CurationVerdict, why: &str| {
        if v.accepted {
            v.accepted = false;
            v.reason = Some(why.to_string());
        }
    };
    if !(config.brightness_min..=config.brightness_max).contains(&brightness) {
        reject(&mut verdict, "brightness");
    }
    if laplacian_var < config.laplacian_min {
        reject(&mut verdict, "laplacian");
    }
    if let (Some(cmd), Some(p)) = (&config.musiq_command, path) {
        let score = run_scorer(cmd, p)?;
        verdict.musiq = Some(score);
        if score < config.musiq_min {
            reject(&mut verdict, "musiq");
        }
    }
    Ok(verdict)
}

/// Reads and screens the clip at `path`; read failures become a rejected
/// verdict rather than an error.
pub fn curate(path: &Path, config: &CurationConfig) -> Result<CurationVerdict> {
    let clip_id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    match read_clip(path) {
        Ok(clip) => curate_clip(&clip_id, &clip, Some(path), config),
        Err(_) => Ok(CurationVerdict::unreadable(&clip_id)),
    }
}
