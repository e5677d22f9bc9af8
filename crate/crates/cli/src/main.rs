use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gvr_core::attention::{AttentionMode, GridLayout};
use gvr_cli::commands::{self, BenchArgs, SdeditModel, Stage};
use gvr_cli::{schema, selftest, CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "gvr", version, about = "Cascaded latent video upsampling toolkit")]
struct Cli {
    /// Pipeline configuration (JSON); defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize first-stage artifacts on clean clips.
    #[command(subcommand)]
    Degrade(DegradeCmd),
    /// Screen every clip of a directory and write verdicts as CSV.
    Curate {
        dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run one stage of the training recipe.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Checkpoint to continue from; required by stages 2 and 3.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured step count of this stage.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Timestep distributions.
    #[command(subcommand)]
    Sampler(SamplerCmd),
    /// Upsample a low-resolution clip.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.45)]
        aug: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Print the default configuration or its JSON Schema, or check a file.
    #[command(subcommand)]
    Config(ConfigCmd),
    /// Run the built-in example checks.
    Selftest,
}

#[derive(Subcommand)]
enum DegradeCmd {
    /// Flow-based color blending and motion blur.
    Flow {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Model-guided degradation through the latent space.
    Sdedit {
        input: PathBuf,
        output: PathBuf,
        /// Defaults to the configured sdedit.alpha.
        #[arg(long)]
        alpha: Option<f64>,
        /// Defaults to the configured sdedit.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// A checkpoint path, or `toy` for the contractive toy field.
        #[arg(long, default_value = "toy")]
        model: SdeditModel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum SamplerCmd {
    /// Trace inference and build the detail-aware distribution.
    Build {
        #[arg(long)]
        model: PathBuf,
        /// Directory of low-resolution clips; held-out synthetic clips when omitted.
        #[arg(long)]
        clips: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Attention cost per mode and grid size.
    Attn(AttnArgs),
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long, value_delimiter = ',', default_value = "full,swin,sparse-local")]
    modes: Vec<AttentionMode>,
    /// Grid sizes as TlxHxW.
    #[arg(long, value_delimiter = ',', value_parser = commands::parse_size, default_value = "1x8x12,2x8x12,4x8x12")]
    sizes: Vec<GridLayout>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Add a measured wall_ms column; the table then varies between runs.
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Subcommand)]
enum ConfigCmd {
    Default,
    Schema,
    Check { path: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = || PipelineConfig::load(cli.config.as_deref());
    match cli.command {
        Command::Degrade(DegradeCmd::Flow { input, output, seed }) => {
            commands::degrade_flow(&load()?, &input, &output, seed)
        }
        Command::Degrade(DegradeCmd::Sdedit {
            input,
            output,
            alpha,
            steps,
            model,
            seed,
        }) => {
            let cfg = load()?;
            let alpha = alpha.unwrap_or(cfg.sdedit.alpha);
            let steps = steps.unwrap_or(cfg.sdedit.steps);
            commands::degrade_sdedit(&cfg, &input, &output, alpha, steps, &model, seed)
        }
        Command::Curate { dir, report } => {
            let verdicts = commands::curate_cmd(&load()?, &dir, &report)?;
            let accepted = verdicts.iter().filter(|v| v.accepted).count();
            println!("{accepted} of {} clips accepted", verdicts.len());
            Ok(())
        }
        Command::Train {
            stage,
            resume,
            steps,
            out,
        } => {
            let outcome = commands::train_stage(&load()?, Stage::from_number(stage)?, resume.as_deref(), steps, &out)?;
            let losses = outcome.report.losses();
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
            let k = losses.len().min(10);
            println!(
                "stage {stage}: steps {}..{}, loss {:.4} -> {:.4}, checkpoint {}",
                outcome.last_step - losses.len(),
                outcome.last_step,
                mean(&losses[..k]),
                mean(&losses[losses.len() - k..]),
                outcome.checkpoint.display()
            );
            Ok(())
        }
        Command::Sampler(SamplerCmd::Build { model, clips, out }) => {
            commands::sampler_build(&load()?, &model, clips.as_deref(), &out)
        }
        Command::Infer {
            model,
            input,
            out,
            steps,
            aug,
            seed,
        } => {
            load()?;
            commands::infer_cmd(&model, &input, &out, steps, aug, seed)
        }
        Command::Bench(BenchCmd::Attn(a)) => {
            let args = BenchArgs {
                modes: a.modes,
                sizes: a.sizes,
                dim: a.dim,
                heads: a.heads,
                repetitions: a.repetitions,
                wall_clock: a.wall_clock,
            };
            let report = commands::bench_attn(&load()?, &args, &a.out)?;
            println!("{} rows written to {}", report.rows().len(), a.out.display());
            Ok(())
        }
        Command::Config(c) => config_cmd(c, cli.config.as_deref()),
        Command::Selftest => {
            let outcomes = selftest::run_all();
            let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
            for o in &outcomes {
                match &o.result {
                    Ok(()) => println!("ok   {}", o.name),
                    Err(e) => println!("FAIL {}: {e}", o.name),
                }
            }
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            if failed > 0 {
                return Err(CliError::runtime(format!("{failed} self-test checks failed")));
            }
            Ok(())
        }
    }
}

fn config_cmd(cmd: ConfigCmd, global: Option<&Path>) -> Result<(), CliError> {
    match cmd {
        ConfigCmd::Default => println!("{}", PipelineConfig::default().to_json()),
        ConfigCmd::Schema => print!("{}", schema::schema_text()),
        ConfigCmd::Check { path } => {
            PipelineConfig::load(Some(&path))?;
            if let Some(g) = global {
                PipelineConfig::load(Some(g))?;
            }
            println!("{}: ok", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.max(1))
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
