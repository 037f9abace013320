use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dpfnas_cli::commands::{self, NoiseSetting, SweepSpec};
use dpfnas_cli::ExperimentConfig;
use dpfnas_core::{Aggregation, PrivacyQuery, SyntheticDatasetSpec};

#[derive(Parser)]
#[command(
    name = "dpfnas",
    version,
    about = "Differentially private federated architecture search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federated search and write metrics.csv, arch.txt,
    /// checkpoint.bin, privacy.txt and privacy_curve.csv.
    Search(SearchArgs),
    /// Train the searched architecture from scratch and report test error.
    Augment(AugmentArgs),
    /// Per-party Gaussian-DP levels for a query.
    PrivacyReport(PrivacyArgs),
    /// Search (and augment) over a grid of party counts and noise variances.
    Sweep(SweepArgs),
    /// Write the synthetic dataset as train.csv, val.csv and test.csv.
    GenData(GenDataArgs),
}

/// Experiment settings. Values given here override the config file, which
/// overrides the built-in defaults.
#[derive(Args, Clone, Default)]
struct SearchArgs {
    /// Flat `key = value` config file (keys as in --help of each flag, with
    /// underscores).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    parties: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Expected per-party batch size B.
    #[arg(long)]
    batch_size: Option<f64>,
    /// Shared Poisson rate for both phases; overrides --batch-size.
    #[arg(long)]
    subsample_p: Option<f64>,
    /// Weight learning rate.
    #[arg(long)]
    lr_w: Option<f64>,
    /// Architecture learning rate.
    #[arg(long)]
    lr_a: Option<f64>,
    #[arg(long)]
    fd_epsilon_scale: Option<f64>,
    #[arg(long)]
    second_order: Option<bool>,
    /// Weight-gradient clip bound; `inf` disables clipping.
    #[arg(long)]
    clip_g: Option<f64>,
    /// Architecture-gradient clip bound; `inf` disables clipping.
    #[arg(long)]
    clip_h: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    /// Leading iterations during which the architecture is held fixed
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// e.g. `gaussian-mixture:dim=16,classes=4,per_class=2000,margin=2,noise=1,seed=0`
    #[arg(long)]
    dataset: Option<SyntheticDatasetSpec>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_parser = ["sum", "mean"])]
    aggregate: Option<String>,
}

impl SearchArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::parse(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { cfg.$f = v; })*};
        }
        set!(
            parties,
            iterations,
            batch_size,
            lr_w,
            lr_a,
            fd_epsilon_scale,
            second_order
        );
        set!(clip_g, clip_h, sigma, tau, topk, warmup, seed, dataset, out_dir);
        if let Some(p) = self.subsample_p {
            cfg.subsample_p = Some(p);
        }
        if let Some(a) = &self.aggregate {
            cfg.aggregate = a.parse::<Aggregation>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct AugmentArgs {
    #[command(flatten)]
    common: SearchArgs,
    /// Defaults to checkpoint.bin in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    augment_lr: Option<f64>,
    #[arg(long)]
    augment_batch_size: Option<usize>,
}

#[derive(Args)]
struct PrivacyArgs {
    /// Expected weight-phase batch size.
    #[arg(long = "B")]
    b: f64,
    /// Expected architecture-phase batch size; defaults to B.
    #[arg(long = "B-val")]
    b_val: Option<f64>,
    #[arg(long = "N-tr")]
    n_tr: usize,
    /// Defaults to N-tr.
    #[arg(long = "N-val")]
    n_val: Option<usize>,
    #[arg(long = "T")]
    t: u64,
    #[arg(long)]
    sigma: f64,
    /// Defaults to sigma.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: SearchArgs,
    /// Comma-separated party counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    parties_grid: Vec<usize>,
    /// Comma-separated noise variances; `none` is the noise-free, clip-free cell.
    #[arg(long, value_delimiter = ',', default_value = "none,1")]
    variance_grid: Vec<String>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Weight learning rate of noise-free cells.
    #[arg(long, default_value_t = 0.5)]
    noise_free_lr_w: f64,
    /// Skip the augment step and report only validation error.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    dataset: Option<SyntheticDatasetSpec>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search(args) => {
            let cfg = args.resolve()?;
            let (result, files) = commands::cmd_search(&cfg)?;
            print!("{}", result.discrete.to_text());
            if let Some(last) = result.metrics.last() {
                println!(
                    "final val_loss={} val_error={}",
                    last.val_loss.unwrap_or(f64::NAN),
                    last.val_error.unwrap_or(f64::NAN)
                );
            }
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Augment(args) => {
            let mut cfg = args.common.resolve()?;
            if let Some(e) = args.epochs {
                cfg.augment_epochs = e;
            }
            if let Some(lr) = args.augment_lr {
                cfg.augment_lr = lr;
            }
            if let Some(b) = args.augment_batch_size {
                cfg.augment_batch_size = b;
            }
            let ckpt = args
                .checkpoint
                .unwrap_or_else(|| cfg.out_dir.join(commands::CHECKPOINT_FILE));
            let report = commands::cmd_augment(&ckpt, &cfg)?;
            print!("{}", report.to_text());
        }
        Command::PrivacyReport(a) => {
            let q = PrivacyQuery {
                batch: a.b,
                batch_val: a.b_val.unwrap_or(a.b),
                n_tr: a.n_tr,
                n_val: a.n_val.unwrap_or(a.n_tr),
                iterations: a.t,
                sigma: a.sigma,
                tau: a.tau.unwrap_or(a.sigma),
            };
            let report = commands::cmd_privacy_report(&q, &a.out_dir)?;
            print!("{}", report.to_text());
        }
        Command::Sweep(a) => {
            let base = a.common.resolve()?;
            let noise = a
                .variance_grid
                .iter()
                .filter(|s| !s.trim().is_empty())
                .map(|s| match s.trim() {
                    "none" => Ok(NoiseSetting::Free),
                    v => v
                        .parse()
                        .map(NoiseSetting::Variance)
                        .with_context(|| format!("bad variance `{v}`")),
                })
                .collect::<Result<Vec<_>>>()?;
            let spec = SweepSpec {
                parties: a.parties_grid,
                noise,
                seeds: a.seeds,
                noise_free_lr_w: a.noise_free_lr_w,
                run_augment: !a.no_augment,
            };
            let (cells, path) = commands::cmd_sweep(&base, &spec)?;
            print!("{}", commands::sweep_csv(&cells)?);
            println!("wrote {}", path.display());
        }
        Command::GenData(a) => {
            let cfg = ExperimentConfig {
                dataset: a.dataset.unwrap_or_default(),
                out_dir: a.out_dir,
                ..Default::default()
            };
            for f in commands::cmd_gen_data(&cfg)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
