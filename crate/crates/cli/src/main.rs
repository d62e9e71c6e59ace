//! `hashjscc`: trains hash modules and relay chains, fits quantizers, evaluates sweeps and
//! draws result figures from one TOML experiment file.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hashjscc::training::TrainMode;
use tracing_subscriber::EnvFilter;

use crate::commands::GridFilter;

#[derive(Parser, Debug)]
#[command(name = "hashjscc", version, about = "Hash-aligned DeepJSCC over multi-hop AWGN relays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment file.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured training mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "baseline-mse" => Ok(TrainMode::BaselineMse),
        "proposed-dhd" => Ok(TrainMode::ProposedDhd),
        _ => Err(format!("expected baseline-mse or proposed-dhd, got {s:?}")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the hash module.
    TrainDhd(Common),
    /// Train one decode-and-forward chain per (SNR, r) grid point.
    TrainDf {
        #[command(flatten)]
        common: Common,
        /// Continue every run from its last epoch checkpoint.
        #[arg(long)]
        resume: bool,
        /// Only train grid points at this SNR.
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        /// Only train grid points with this relay count.
        #[arg(long)]
        r: Option<usize>,
    },
    /// Fit quantizer codebooks on validation-set channel outputs of the r = 0 codecs.
    FitVq {
        #[command(flatten)]
        common: Common,
        /// Use channel outputs of at most this many validation images.
        #[arg(long)]
        max_images: Option<usize>,
    },
    /// Evaluate every trained chain on the test split.
    EvalDf(Common),
    /// Evaluate quantize-and-forward at every rate on the test split.
    EvalQf(Common),
    /// Draw figures from evaluated results.
    Plot {
        /// Experiment output directory (defaults to the configured one).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        config: Option<PathBuf>,
    },
    /// Build train/val/test manifests from a NUS-WIDE style image list and concept labels.
    ConvertNusWide {
        #[arg(long)]
        image_list: PathBuf,
        #[arg(long)]
        labels_dir: PathBuf,
        /// Comma-separated concept names.
        #[arg(long, value_delimiter = ',', required = true)]
        concepts: Vec<String>,
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [9450, 1050, 2100])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(c: &Common) -> anyhow::Result<config::ExperimentConfig> {
    config::resolve(&c.config, c.seed, c.out.clone(), c.mode)
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::TrainDhd(c) => commands::train_dhd_cmd(&resolve(&c)?),
        Command::TrainDf { common, resume, snr, r } => {
            commands::train_df_cmd(&resolve(&common)?, resume, &GridFilter { snr, r })
        }
        Command::FitVq { common, max_images } => commands::fit_vq_cmd(&resolve(&common)?, max_images),
        Command::EvalDf(c) => commands::eval_df_cmd(&resolve(&c)?).map(drop),
        Command::EvalQf(c) => commands::eval_qf_cmd(&resolve(&c)?).map(drop),
        Command::Plot { out, config } => {
            let out = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => config::ExperimentConfig::load(&c)?.out_dir,
                (None, None) => anyhow::bail!("pass --out or --config"),
            };
            for p in plot::plot_cmd(&out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::ConvertNusWide {
            image_list,
            labels_dir,
            concepts,
            sizes,
            seed,
            out,
        } => commands::convert_cmd(&image_list, &labels_dir, &concepts, [sizes[0], sizes[1], sizes[2]], seed, &out),
    }
}
