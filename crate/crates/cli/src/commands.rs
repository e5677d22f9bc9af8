//! Implementations of the subcommands. Each takes parsed arguments and the
//! pipeline configuration and writes its artifacts to disk.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use gvr_core::attention::{bench_attention, bench_report, AttentionMode, BenchSpec, GridLayout};
use gvr_core::codec::{decode, encode, Latent};
use gvr_core::curation::{curate, CurationVerdict};
use gvr_core::degrade::degrade_clip;
use gvr_core::flow::{build_detail_aware_sampler, sdedit_degrade, ContractiveToyVelocity};
use gvr_core::media::{emit_report, read_clip, write_clip, Clip, Report};
use gvr_core::{Error, Rng};
use gvr_model::data::{downsample_clip, from_model_space, to_model_space};
use gvr_model::{
    collect_trace, extend_temporal, infer_clip, load_checkpoint, save_checkpoint, synthetic_pairs, train, Conditioning,
    DatasetSpec, ExtensionPlan, GvrModel, PairDegradation, TrainReport,
};

use crate::config::PipelineConfig;
use crate::error::CliError;

pub type CmdResult<T = ()> = Result<T, CliError>;

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))
}

fn create_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn degrade_flow(cfg: &PipelineConfig, input: &Path, output: &Path, seed: u64) -> CmdResult {
    let clip = read_clip(input)?;
    let out = degrade_clip(&clip, &cfg.flow_degrade, &Rng::new(seed, 0))?;
    create_parent(output)?;
    write_clip(&out, output)?;
    Ok(())
}

/// Where the velocity field of model-guided degradation comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum SdeditModel {
    Toy,
    Checkpoint(PathBuf),
}

impl std::str::FromStr for SdeditModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(if s == "toy" {
            SdeditModel::Toy
        } else {
            SdeditModel::Checkpoint(PathBuf::from(s))
        })
    }
}

/// Encodes the clip, corrupts its latent to level `alpha`, integrates back
/// and decodes. A checkpoint is conditioned on the clip's own downsampled
/// latent with an empty prompt.
pub fn degrade_sdedit(
    cfg: &PipelineConfig,
    input: &Path,
    output: &Path,
    alpha: f64,
    steps: usize,
    model: &SdeditModel,
    seed: u64,
) -> CmdResult {
    let clip = read_clip(input)?;
    let mut rng = Rng::new(seed, 0);
    let out = match model {
        SdeditModel::Toy => {
            let codec = cfg.model.codec;
            let c0 = to_model_space(&encode(&clip, codec)?.data);
            let z = sdedit_degrade(&ContractiveToyVelocity::default(), &c0, alpha, steps, &mut rng, &())?;
            decode(&Latent::new(from_model_space(&z), codec)?, clip.frame_rate())?
        }
        SdeditModel::Checkpoint(path) => {
            let (m, _) = load_checkpoint(path)?;
            let codec = m.config.codec;
            let c0 = to_model_space(&encode(&clip, codec)?.data);
            let lr = to_model_space(&encode(&downsample_clip(&clip, m.config.upsample)?, codec)?.data);
            let cond = Conditioning {
                c_aug: lr,
                aug_level: 0.0,
                text: None,
            };
            let z = sdedit_degrade(&m, &c0, alpha, steps, &mut rng, &cond)?;
            decode(&Latent::new(from_model_space(&z), codec)?, clip.frame_rate())?
        }
    };
    create_parent(output)?;
    write_clip(&out, output)?;
    Ok(())
}

/// Clip entries of a directory: `.y4m` files, single frames and frame
/// directories, sorted by name.
pub fn list_clips(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::runtime(format!("reading {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                || matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("y4m") | Some("ppm") | Some("png")
                )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::validation(format!("{}: no clips found", dir.display())));
    }
    Ok(paths)
}

pub const CURATION_COLUMNS: [&str; 6] = ["clip_id", "brightness", "laplacian_var", "musiq", "accepted", "reason"];

pub fn verdict_report(verdicts: &[CurationVerdict]) -> CmdResult<Report> {
    let mut r = Report::new(CURATION_COLUMNS);
    for v in verdicts {
        r.push([
            v.clip_id.clone(),
            format!("{:.6}", v.brightness),
            format!("{:.6}", v.laplacian_var),
            v.musiq.map_or_else(|| "n/a".to_string(), |m| format!("{m:.4}")),
            v.accepted.to_string(),
            v.reason.clone().unwrap_or_default(),
        ])?;
    }
    Ok(r)
}

/// Verdicts for every clip under `dir`, in name order.
pub fn curate_dir(cfg: &PipelineConfig, dir: &Path) -> CmdResult<Vec<CurationVerdict>> {
    cfg.curation.validate()?;
    let paths = list_clips(dir)?;
    let verdicts = paths
        .par_iter()
        .map(|p| curate(p, &cfg.curation))
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(verdicts)
}

pub fn curate_cmd(cfg: &PipelineConfig, dir: &Path, report: &Path) -> CmdResult<Vec<CurationVerdict>> {
    let verdicts = curate_dir(cfg, dir)?;
    create_parent(report)?;
    emit_report(&verdict_report(&verdicts)?, report)?;
    Ok(verdicts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Bicubic-only pairs.
    OneOrder = 1,
    /// Flow and model-guided degradation pairs.
    Degraded = 2,
    /// Long clips under temporal units and sparse local attention.
    Extension = 3,
}

impl Stage {
    pub fn from_number(n: u8) -> CmdResult<Self> {
        match n {
            1 => Ok(Stage::OneOrder),
            2 => Ok(Stage::Degraded),
            3 => Ok(Stage::Extension),
            _ => Err(CliError::validation(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    fn index(self) -> usize {
        self as usize - 1
    }
}

pub struct TrainOutcome {
    pub model: GvrModel,
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub last_step: usize,
}

/// Runs one training stage and writes `model.gvrm` and `loss.csv` into
/// `out`. Stages 2 and 3 continue from `resume`; stage 1 starts fresh
/// unless `resume` is given.
pub fn train_stage(
    cfg: &PipelineConfig,
    stage: Stage,
    resume: Option<&Path>,
    steps: Option<usize>,
    out: &Path,
) -> CmdResult<TrainOutcome> {
    let (mut model, first_step) = match resume {
        Some(p) => load_checkpoint(p)?,
        None if stage == Stage::OneOrder => (GvrModel::new(cfg.gvr_config(), cfg.model.seed)?, 0),
        None => {
            return Err(CliError::validation(format!(
                "stage {} continues a previous stage; pass --resume <checkpoint>",
                stage as u8
            )))
        }
    };
    let tc = cfg.train_config(steps.unwrap_or(cfg.train.stage_steps[stage.index()]));
    tc.validate()?;
    let m = &model.config;
    let degraded = PairDegradation::FlowSdedit {
        params: cfg.flow_degrade.clone(),
        alpha: cfg.sdedit.alpha,
        steps: cfg.sdedit.steps,
    };
    let report = match stage {
        Stage::OneOrder => {
            let data = synthetic_pairs(&cfg.train.dataset, m.upsample, m.codec, m.text_dim, &PairDegradation::OneOrder)?;
            train(&mut model, &data, &tc, first_step)?
        }
        Stage::Degraded => {
            let data = synthetic_pairs(&cfg.train.dataset, m.upsample, m.codec, m.text_dim, &degraded)?;
            train(&mut model, &data, &tc, first_step)?
        }
        Stage::Extension => {
            let spec = DatasetSpec {
                frames: cfg.train.long_frames,
                ..cfg.train.dataset.clone()
            };
            let data = synthetic_pairs(&spec, m.upsample, m.codec, m.text_dim, &degraded)?;
            let plan = ExtensionPlan {
                unit: cfg.attention.temporal.unit,
                mode: AttentionMode::SparseLocal,
                top_k: cfg.attention.top_k,
            };
            extend_temporal(&mut model, plan, &data, &tc, first_step)?
        }
    };
    let last_step = first_step + tc.steps;
    create_dir(out)?;
    let checkpoint = out.join("model.gvrm");
    save_checkpoint(&model, last_step, &checkpoint)?;
    report.write_csv(out.join("loss.csv"))?;
    Ok(TrainOutcome {
        model,
        report,
        checkpoint,
        last_step,
    })
}

/// Low-resolution latents (model space) of the clips under `dir`, or of
/// `count` held-out synthetic clips when no directory is given.
fn trace_latents(cfg: &PipelineConfig, model: &GvrModel, clips: Option<&Path>) -> CmdResult<Vec<gvr_core::Tensor>> {
    let codec = model.config.codec;
    let lr_clips: Vec<Clip> = match clips {
        Some(dir) => list_clips(dir)?
            .par_iter()
            .map(read_clip)
            .collect::<Result<_, Error>>()?,
        None => {
            let spec = DatasetSpec {
                clips: cfg.sampler.traces,
                seed: cfg.sampler.seed,
                ..cfg.train.dataset.clone()
            };
            (0..spec.clips)
                .into_par_iter()
                .map(|i| downsample_clip(&spec.render(i)?, model.config.upsample))
                .collect::<Result<_, Error>>()?
        }
    };
    let latents = lr_clips
        .par_iter()
        .map(|c| Ok(to_model_space(&encode(c, codec)?.data)))
        .collect::<Result<_, Error>>()?;
    Ok(latents)
}

/// Traces inference on low-resolution clips and writes `sampler.csv` and
/// `sampler.svg` into `out`.
pub fn sampler_build(cfg: &PipelineConfig, model_path: &Path, clips: Option<&Path>, out: &Path) -> CmdResult {
    let (model, _) = load_checkpoint(model_path)?;
    let latents = trace_latents(cfg, &model, clips)?;
    let s = &cfg.sampler;
    let traces = collect_trace(&model, &latents, s.steps, s.aug_level, s.seed)?;
    let dist = build_detail_aware_sampler(&traces, s.detail)?;
    create_dir(out)?;
    dist.write_csv(out.join("sampler.csv"))?;
    dist.write_curve(out.join("sampler.svg"))?;
    Ok(())
}

pub fn infer_cmd(model_path: &Path, input: &Path, output: &Path, steps: usize, aug: f64, seed: u64) -> CmdResult {
    let (model, _) = load_checkpoint(model_path)?;
    let lr = read_clip(input)?;
    let hr = infer_clip(&model, &lr, steps, aug, seed)?;
    create_parent(output)?;
    write_clip(&hr, output)?;
    Ok(())
}

/// Parses `TlxHxW` grid sizes, e.g. `4x8x8`.
pub fn parse_size(s: &str) -> Result<GridLayout, String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("size {s:?} must look like 4x8x8"))?;
    match parts[..] {
        [frames, height, width] if frames * height * width > 0 => Ok(GridLayout { frames, height, width }),
        _ => Err(format!("size {s:?} must be three positive extents TlxHxW")),
    }
}

pub struct BenchArgs {
    pub modes: Vec<AttentionMode>,
    pub sizes: Vec<GridLayout>,
    pub dim: usize,
    pub heads: usize,
    pub repetitions: usize,
    pub wall_clock: bool,
}

pub fn bench_attn(cfg: &PipelineConfig, args: &BenchArgs, out: &Path) -> CmdResult<Report> {
    if args.modes.is_empty() || args.sizes.is_empty() {
        return Err(CliError::validation("bench needs at least one mode and one size"));
    }
    let spec = BenchSpec {
        modes: args.modes.clone(),
        sizes: args.sizes.clone(),
        dim: args.dim,
        heads: args.heads,
        base: cfg.attention.clone(),
        repetitions: args.repetitions,
        seed: 0,
    };
    let rows = bench_attention(&spec)?;
    let report = bench_report(&rows, args.wall_clock)?;
    create_parent(out)?;
    emit_report(&report, out)?;
    Ok(report)
}
