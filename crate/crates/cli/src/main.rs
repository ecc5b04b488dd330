//! Command-line driver: training, SER sweeps and channel-file generation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vbinet::channel::{save_channels, ChannelSource};
use vbinet::harness::{manifest_path, run_experiment, ExperimentKind, ExperimentSpec, ResultRow};
use vbinet::params::Dims;
use vbinet::rng::{stream, CHANNEL_FILE_DOMAIN};
use vbinet::training::{
    train_offline, train_online, write_training_outputs, ChannelModel, TrainConfig, TrainMode, TrainOutcome,
};

#[derive(Parser)]
#[command(name = "vbinet", version, about = "MIMO detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output path in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes params, loss curve and manifest into --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Channel file for online training.
        #[arg(long)]
        channels: Option<PathBuf>,
    },
    /// SER against SNR.
    Sweep(Common),
    /// SER against the number of layers.
    Layers(Common),
    /// SER against the noise uncertainty factor.
    Nuf(Common),
    /// Write random channel realizations to a channel file.
    GenChannels(Common),
    /// Run the experiment exactly as its config describes.
    Eval(Common),
}

/// Config of `gen-channels`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenChannelsConfig {
    dims: Dims,
    channel: ChannelSource,
    count: usize,
    seed: u64,
    output: PathBuf,
}

impl Default for GenChannelsConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new(8, 4),
            channel: ChannelSource::Iid,
            count: 1,
            seed: 0,
            output: PathBuf::from("channels.bin"),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run_spec(common: &Common, kind: Option<ExperimentKind>) -> Result<()> {
    let mut spec: ExperimentSpec = read_json(&common.config)?;
    if let Some(k) = kind {
        spec.experiment = k;
    }
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    if let Some(out) = &common.out {
        spec.output = out.clone();
    }
    let rows = run_experiment(&spec)?;
    print_rows(&rows);
    println!("wrote {} and {}", spec.output.display(), manifest_path(&spec.output).display());
    Ok(())
}

fn print_rows(rows: &[ResultRow]) {
    for r in rows {
        println!(
            "{:<16} snr {:>6.2} dB  nuf {:>5.2} dB  L {:>3}  ser {:.3e}  ({} / {})",
            r.detector, r.snr_db, r.nuf_db, r.layers, r.ser, r.errors, r.symbols
        );
    }
}

fn summarize(outcome: &TrainOutcome) {
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("loss {first:.4e} -> {last:.4e} over {} iterations", outcome.losses.len());
    }
}

fn train(common: &Common, channels: Option<&Path>) -> Result<()> {
    let mut cfg: TrainConfig = read_json(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("train_out"));
    match cfg.mode {
        TrainMode::Offline => {
            let outcome = train_offline(&cfg, None)?;
            summarize(&outcome);
            let manifest = write_training_outputs(&cfg, &outcome, &out)?;
            println!("params in {}", manifest.params_path.display());
        }
        TrainMode::Online => {
            let Some(path) = channels else {
                bail!("online training needs --channels <file>");
            };
            let hs: Vec<_> = vbinet::channel::load_channels(path)?.into_iter().map(|r| r.h).collect();
            let results = train_online(&hs, &cfg, None)?;
            for (k, r) in results.into_iter().enumerate() {
                let outcome = TrainOutcome {
                    params: r.params,
                    losses: r.losses,
                };
                let dir = out.join(format!("channel_{k}"));
                write_training_outputs(&cfg, &outcome, &dir)?;
                println!("channel {k}: held-out loss {:.4e} -> {:.4e}", r.initial_loss, r.final_loss);
            }
            println!("params in {}/channel_*", out.display());
        }
    }
    Ok(())
}

fn gen_channels(common: &Common) -> Result<()> {
    let mut cfg: GenChannelsConfig = read_json(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    let model = ChannelModel::new(cfg.channel, cfg.dims)?;
    let hs = (0..cfg.count)
        .map(|k| model.sample(&mut stream(cfg.seed, CHANNEL_FILE_DOMAIN, k as u64)))
        .collect::<vbinet::Result<Vec<_>>>()?;
    save_channels(&cfg.output, &hs)?;
    println!("wrote {} channels to {}", hs.len(), cfg.output.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { common, channels } => train(common, channels.as_deref()),
        Command::Sweep(c) => run_spec(c, Some(ExperimentKind::SerSweep)),
        Command::Layers(c) => run_spec(c, Some(ExperimentKind::LayerSweep)),
        Command::Nuf(c) => run_spec(c, Some(ExperimentKind::NoiseUncertainty)),
        Command::GenChannels(c) => gen_channels(c),
        Command::Eval(c) => run_spec(c, None),
    }
}
