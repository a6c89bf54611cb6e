use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use coop_rx::sim::{parse_snr_list, run_sweep, split_schedule_list, write_csv, NamedSchedule, RunConfig};
use coop_rx::Error;

/// Monte-Carlo BER sweep of cooperating iterative receivers.
#[derive(Debug, Parser)]
#[command(name = "coop-rx", version)]
struct Cli {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated SNR points in dB.
    #[arg(long)]
    snr: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Schedule names (none, nex1, nex2, nex19, full) or `nex:t1,t2,...`,
    /// comma-separated.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Give every receiver the true channel weights.
    #[arg(long)]
    genie_channel: bool,
    /// Give every receiver the true noise precision.
    #[arg(long)]
    genie_noise: bool,
}

fn configure(cli: &Cli) -> coop_rx::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(snr) = &cli.snr {
        cfg.snr_db = parse_snr_list(snr)?;
    }
    if let Some(f) = cli.frames {
        cfg.frames = f;
    }
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(list) = &cli.schedule {
        cfg.schedules = split_schedule_list(list)?.iter().map(|s| NamedSchedule::parse(s, cfg.n_it)).collect::<coop_rx::Result<_>>()?;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    cfg.genie_channel |= cli.genie_channel;
    cfg.genie_noise |= cli.genie_noise;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> coop_rx::Result<()> {
    let cfg = configure(cli)?;
    let records = run_sweep(&cfg)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("ber.csv"));
    write_csv(&records, &out)?;
    eprintln!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                Error::Io { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
