//! Command-line front end. Flags override values from `--config`, which may
//! be a config file or a previously written `manifest.json`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceMode, GuidancePair};
use crate::numerics::Shape;
use crate::style::Distance;

use super::config::{DataKind, ExperimentConfig};
use super::experiments::{
    run_ablation_to_dir, run_diversity_to_dir, run_sample_to_dir, run_sweep_to_dir,
    run_train_to_dir, run_two_step_to_dir, select_s0, summarize_sweep,
};

#[derive(Debug, Parser)]
#[command(
    name = "styleguide",
    version,
    about = "Style-guided diffusion sampling experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the affine denoiser to the configured Gaussian data law.
    Train(TrainArgs),
    /// Sample one batch per seed and write images and metrics.
    Sample(CommonArgs),
    /// Supervised guidance over a grid of base scales (`--s0 0,10,100`).
    Sweep(CommonArgs),
    /// Ablation over guidance settings with per-setting scale tuning.
    Ablate(CommonArgs),
    /// Guided sampling against unguided sampling plus post-hoc transfer.
    TwoStep(CommonArgs),
    /// Unguided, synonymous and contrastive batches side by side.
    Diversity(DiversityArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config or manifest to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    mode: Option<GuidanceMode>,
    /// Base scale; for `sweep`, the comma-separated grid.
    #[arg(long, value_delimiter = ',')]
    s0: Vec<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Template name (e.g. `checker:4`) or a `.ppm` path.
    #[arg(long)]
    style: Option<String>,
    /// gaussian, gmm or affine.
    #[arg(long)]
    data: Option<String>,
    /// Trained affine model for `--data affine`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Square image side length.
    #[arg(long)]
    size: Option<usize>,
    /// mae or mse.
    #[arg(long)]
    distance: Option<String>,
    /// x0hat or xt.
    #[arg(long)]
    pair: Option<String>,
    /// Use the base scale unchanged at every step.
    #[arg(long)]
    fixed_scale: bool,
    /// Level weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long)]
    gamma_c: Option<f64>,
    /// Differentiate through the denoiser (needs a closed-form Jacobian).
    #[arg(long)]
    grad_through_eps: bool,
    /// Guide only steps t >= this value.
    #[arg(long)]
    guide_from: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    train_batch: Option<usize>,
}

#[derive(Debug, Args)]
struct DiversityArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    synonymous_s0: Option<f64>,
    #[arg(long)]
    contrastive_s0: Option<f64>,
}

fn parse_kind<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("invalid value {value:?} for --{flag}")))
}

fn build_config(a: &CommonArgs, grid_flag: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if !a.seed.is_empty() {
        cfg.seeds = a.seed.clone();
    }
    if let Some(m) = a.mode {
        cfg.guidance.mode = m;
    }
    if grid_flag {
        if !a.s0.is_empty() {
            cfg.sweep.s0_grid = a.s0.clone();
        }
    } else {
        match a.s0.as_slice() {
            [] => {}
            [s] => cfg.guidance.s0 = *s,
            _ => return Err(Error::Config("--s0 takes a single value here".into())),
        }
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(s) = &a.style {
        cfg.style.source = s.clone();
    }
    if let Some(d) = &a.data {
        cfg.data.kind = parse_kind::<DataKind>("data", d)?;
    }
    if let Some(m) = &a.model {
        cfg.data.model_path = Some(m.clone());
    }
    if let Some(t) = a.steps {
        cfg.schedule.steps = t;
    }
    if let Some(n) = a.size {
        cfg.image = Shape::new(n, n, cfg.image.channels)?;
    }
    if let Some(d) = &a.distance {
        cfg.guidance.distance = parse_kind::<Distance>("distance", d)?;
    }
    if let Some(p) = &a.pair {
        cfg.guidance.pair = parse_kind::<GuidancePair>("pair", p)?;
    }
    if a.fixed_scale {
        cfg.guidance.adaptive = false;
    }
    if !a.weights.is_empty() {
        cfg.guidance.weights = a.weights.clone();
    }
    if let Some(g) = a.gamma_c {
        cfg.guidance.gamma_c = g;
    }
    if a.grad_through_eps {
        cfg.guidance.grad_through_eps = true;
    }
    if let Some(g) = a.guide_from {
        cfg.guide_from_step = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => {
            let mut cfg = build_config(&a.common, false)?;
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            if let Some(lr) = a.lr {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = a.train_batch {
                cfg.train.batch_size = b;
            }
            let path = run_train_to_dir(&cfg)?;
            println!("model written to {}", path.display());
        }
        Command::Sample(a) => {
            let cfg = build_config(&a, false)?;
            for r in run_sample_to_dir(&cfg)? {
                println!(
                    "{} {} s0={} style_loss={:.6} content_score={:.4}",
                    r.run_id, r.mode, r.s0, r.style_loss, r.content_score
                );
            }
        }
        Command::Sweep(a) => {
            let cfg = build_config(&a, true)?;
            let rows = run_sweep_to_dir(&cfg)?;
            let summary = summarize_sweep(&rows);
            for s in &summary {
                println!(
                    "s0={} style_loss={:.6} content_score={:.4} diverged={}",
                    s.s0, s.style_loss, s.content_score, s.diverged
                );
            }
            if let Some(best) = select_s0(&summary) {
                println!("lowest style loss at s0={best}");
            }
        }
        Command::Ablate(a) => {
            let cfg = build_config(&a, false)?;
            let out = run_ablation_to_dir(&cfg)?;
            println!("reference weights {:?}", out.weights);
            for s in &out.settings {
                println!("#{} {} s0={}", s.id, s.name, s.config.s0);
            }
        }
        Command::TwoStep(a) => {
            let cfg = build_config(&a, false)?;
            let rows = run_two_step_to_dir(&cfg)?;
            let n = rows.len() as f64;
            let mean =
                |f: fn(&super::experiments::TwoStepRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
            println!(
                "style loss: unguided={:.6} guided={:.6} iterative={:.6} moment={:.6}",
                mean(|r| r.unguided),
                mean(|r| r.guided),
                mean(|r| r.iterative),
                mean(|r| r.moment)
            );
        }
        Command::Diversity(a) => {
            let mut cfg = build_config(&a.common, false)?;
            if let Some(s) = a.synonymous_s0 {
                cfg.diversity.synonymous_s0 = s;
            }
            if let Some(s) = a.contrastive_s0 {
                cfg.diversity.contrastive_s0 = s;
            }
            for r in run_diversity_to_dir(&cfg)? {
                println!(
                    "s{} {} diversity={:.6} feature_variance={:.6}",
                    r.seed, r.mode, r.batch_diversity, r.feature_variance
                );
            }
        }
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code: 0 on success, 2 for
/// usage and configuration errors, 3 for a diverged chain, 1 for I/O.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
