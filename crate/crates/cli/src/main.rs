use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use conmae::config::RunConfig;
use conmae::pipeline;

#[derive(Parser)]
#[command(name = "conmae", version, about = "Contour-guided MAE pretraining and unsupervised re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (a PNG path for `visualize`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskMode {
    /// Keep the highest-contour patches visible (γ = 1).
    Contour,
    /// Uniform random masking (γ = 0).
    Random,
    /// Half by contour score, half at random, unless the config sets γ in (0, 1).
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelMode {
    /// Mix with the previous epoch's labels (λ from the config).
    Soft,
    /// Plain one-hot pseudo-labels (λ = 1).
    Hard,
}

#[derive(Args)]
struct DatasetArg {
    /// Dataset directory containing manifest.json (defaults to the config's `dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct ReidArgs {
    #[arg(long, value_enum)]
    label_mode: Option<LabelMode>,
    /// DBSCAN neighbourhood radius.
    #[arg(long)]
    eps: Option<f64>,
    /// DBSCAN core-point threshold.
    #[arg(long)]
    min_samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the masked autoencoder on the train split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long, value_enum)]
        mask_mode: Option<MaskMode>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epochs, overriding the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a checkpoint with clustering pseudo-labels.
    TrainReid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        reid: ReidArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the query/gallery split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Original / contour / masked / reconstructed grid for some images.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mask_mode: Option<MaskMode>,
        images: Vec<PathBuf>,
    },
    /// Full pipeline at mask rates 0.55, 0.65, 0.75 and 0.85.
    SweepMaskRate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DatasetArg,
        #[command(flatten)]
        reid: ReidArgs,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn apply_mask_mode(cfg: &mut RunConfig, mode: Option<MaskMode>) {
    match mode {
        Some(MaskMode::Contour) => cfg.mae.contour_fraction = 1.0,
        Some(MaskMode::Random) => cfg.mae.contour_fraction = 0.0,
        Some(MaskMode::Mixed) => {
            let g = cfg.mae.contour_fraction;
            if !(g > 0.0 && g < 1.0) {
                cfg.mae.contour_fraction = 0.5;
            }
        }
        None => {}
    }
}

fn apply_reid_args(cfg: &mut RunConfig, args: &ReidArgs) {
    if let Some(LabelMode::Hard) = args.label_mode {
        cfg.reid.lambda = 1.0;
    }
    if let Some(eps) = args.eps {
        cfg.reid.eps = eps;
    }
    if let Some(m) = args.min_samples {
        cfg.reid.min_samples = m;
    }
}

fn out_dir(common: &Common, cfg: &RunConfig, sub: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output.join(sub))
}

fn dataset_dir(arg: &DatasetArg, cfg: &RunConfig) -> PathBuf {
    arg.dataset.clone().unwrap_or_else(|| cfg.dataset.clone())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            let records = pipeline::gen_data(&cfg, &out).with_context(|| format!("generating dataset in {}", out.display()))?;
            println!("wrote {} images to {}", records.len(), out.display());
        }
        Command::Pretrain {
            common,
            data,
            mask_mode,
            resume,
            epochs,
        } => {
            let mut cfg = load_config(&common)?;
            apply_mask_mode(&mut cfg, mask_mode);
            if let Some(e) = epochs {
                cfg.mae.epochs = e;
            }
            cfg.validate()?;
            if let Some(r) = &resume {
                require_file(r, "checkpoint")?;
            }
            let out = out_dir(&common, &cfg, "pretrain");
            let curve = pipeline::pretrain(&cfg, &dataset_dir(&data, &cfg), &out, resume.as_deref())?;
            match curve.last() {
                Some(last) => println!("epoch {} loss {:.6}; checkpoint in {}", last.epoch, last.loss, out.display()),
                None => println!("nothing to do; checkpoint in {}", out.display()),
            }
        }
        Command::TrainReid {
            common,
            data,
            checkpoint,
            reid,
            epochs,
        } => {
            let mut cfg = load_config(&common)?;
            apply_reid_args(&mut cfg, &reid);
            if let Some(e) = epochs {
                cfg.reid.epochs = e;
            }
            cfg.validate()?;
            require_file(&checkpoint, "checkpoint")?;
            let out = out_dir(&common, &cfg, "reid");
            let history = pipeline::train_reid(&cfg, &dataset_dir(&data, &cfg), &checkpoint, &out)?;
            if let Some(e) = history.iter().rev().find_map(|m| m.eval.as_ref()) {
                println!("mAP {:.4} rank1 {:.4}", e.map, e.rank1);
            }
            println!("checkpoint and metrics in {}", out.display());
        }
        Command::Eval { common, data, checkpoint } => {
            let cfg = load_config(&common)?;
            require_file(&checkpoint, "checkpoint")?;
            let out = out_dir(&common, &cfg, "eval");
            let r = pipeline::evaluate(&cfg, &dataset_dir(&data, &cfg), &checkpoint, &out)?;
            println!(
                "mAP {:.4} rank1 {:.4} rank5 {:.4} rank10 {:.4} (chance mAP {:.4} ± {:.4})",
                r.metrics.map, r.metrics.rank1, r.metrics.rank5, r.metrics.rank10, r.chance_map_mean, r.chance_map_std
            );
        }
        Command::Visualize {
            common,
            checkpoint,
            mask_mode,
            images,
        } => {
            let mut cfg = load_config(&common)?;
            apply_mask_mode(&mut cfg, mask_mode);
            cfg.validate()?;
            if images.is_empty() {
                bail!("no images given to visualize");
            }
            require_file(&checkpoint, "checkpoint")?;
            let out = common.out.clone().unwrap_or_else(|| cfg.output.join("visualize.png"));
            let out = if out.extension().is_none() { out.join("visualize.png") } else { out };
            pipeline::visualize(&cfg, &checkpoint, &images, &out)?;
            println!("wrote {}", out.display());
        }
        Command::SweepMaskRate { common, data, reid } => {
            let mut cfg = load_config(&common)?;
            apply_reid_args(&mut cfg, &reid);
            cfg.validate()?;
            let out = out_dir(&common, &cfg, "sweep");
            let rows = pipeline::sweep_mask_rate(&cfg, &dataset_dir(&data, &cfg), &out)?;
            for r in &rows {
                println!("mask rate {:.2}: mAP {:.4}", r.mask_rate, r.metrics.map);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
