//! `rfpa`: run the fingerprinting attack pipeline stage by stage.
//!
//! Every stage reads and writes one run directory (`--out`, default the
//! config's `output_dir`). The first stage snapshots the resolved config
//! there; later stages refuse to run if their config hashes differently.

mod commands;
mod report;
mod run;

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rfpa::loopback::service::{LoopServer, ServiceConfig};
use rfpa::loopback::{sample_profile, ChannelConfig, Severity, TransmitterProfile};

use crate::run::Run;

#[derive(Parser)]
#[command(name = "rfpa", version, about = "Attacks on neural RF fingerprinting, simulated end to end")]
struct Cli {
    /// Experiment config (TOML); defaults to the run directory's snapshot.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for inputs and outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileKind {
    /// No impairments.
    Identity,
    Legit,
    Attacker,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize headers and record them through every legit loop.
    GenDataset,
    /// Train the fingerprint embedder on the train split.
    TrainEmbedder,
    /// Enrol references and calibrate the acceptance threshold.
    Calibrate,
    /// Optimise a jamming signal and sweep its FRR over power ratios.
    AttackJam,
    /// Craft poisoning sequences and sweep the threshold grid.
    AttackPoison,
    /// Optimise additive spoofing bursts on replays for each channel.
    AttackSpoofGd,
    /// Train the replay generator against its discriminator.
    TrainGan,
    /// Verification metrics, plus replay detection if a GAN exists.
    Evaluate,
    /// Collate the run's CSVs into report.md.
    Report {
        /// Captured output of the acceptance suite to tabulate.
        #[arg(long)]
        acceptance: Option<PathBuf>,
    },
    /// Serve the transmit-receive loop over TCP.
    ServeLoop {
        #[arg(long, value_enum, default_value = "identity")]
        profile: ProfileKind,
        #[arg(long, default_value_t = 0)]
        profile_id: u64,
        #[arg(long, default_value_t = 42)]
        profile_seed: u64,
        /// Channel preset name or a path to a channel TOML file.
        #[arg(long, default_value = "wired")]
        channel: String,
        #[arg(long, default_value_t = 5555)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 25e6)]
        sample_rate_hz: f64,
    },
}

fn channel_arg(name: &str) -> Result<ChannelConfig> {
    if let Ok(c) = ChannelConfig::preset(name) {
        return Ok(c);
    }
    let text = std::fs::read_to_string(name).with_context(|| format!("{name:?} is neither a preset nor a readable file"))?;
    Ok(ChannelConfig::from_toml(&text)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::ServeLoop {
        profile,
        profile_id,
        profile_seed,
        channel,
        port,
        host,
        sample_rate_hz,
    } = &cli.command
    {
        let profile = match profile {
            ProfileKind::Identity => TransmitterProfile::identity(*profile_id),
            ProfileKind::Legit => sample_profile(*profile_id, Severity::Legit, *profile_seed),
            ProfileKind::Attacker => sample_profile(*profile_id, Severity::Attacker, *profile_seed),
        };
        let addr: SocketAddr = format!("{host}:{port}").parse().context("bad listen address")?;
        let server = LoopServer::bind(
            addr,
            ServiceConfig {
                profile,
                channel: channel_arg(channel)?,
                seed: cli.seed.unwrap_or(0),
                sample_rate_hz: *sample_rate_hz,
            },
        )?;
        println!("serving on {}", server.local_addr()?);
        server.serve()?;
        return Ok(());
    }

    let run = Run::open(cli.config.as_deref(), cli.seed, cli.out.as_deref())?;
    log::info!("run {} (config {})", run.dir.display(), run.hash);
    match &cli.command {
        Command::GenDataset => commands::gen_dataset(&run),
        Command::TrainEmbedder => commands::train(&run),
        Command::Calibrate => commands::calibrate(&run),
        Command::AttackJam => commands::attack_jam(&run),
        Command::AttackPoison => commands::attack_poison(&run),
        Command::AttackSpoofGd => commands::attack_spoof_gd(&run),
        Command::TrainGan => commands::train_gan(&run),
        Command::Evaluate => commands::evaluate(&run),
        Command::Report { acceptance } => report::report(&run, acceptance.as_deref()),
        Command::ServeLoop { .. } => unreachable!("handled above"),
    }
}
