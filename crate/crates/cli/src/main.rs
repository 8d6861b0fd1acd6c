use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recycle_tn::harness::{self, RunConfig};
use recycle_tn::Error;

#[derive(Parser)]
#[command(name = "recycle-tn", version, about = "Imaginary-time evolution with environment recycling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve a single parameter point.
    Run(Flags),
    /// Evolve every combination of the listed h, n_re and update values.
    Sweep(Flags),
}

/// Every flag overrides the matching key of the config file.
#[derive(Args)]
struct Flags {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// ising1d or ising2d
    #[arg(long)]
    model: Option<String>,
    /// Field strength; a list or start:stop:step range for sweeps
    #[arg(long)]
    h: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    /// iMPS bond dimension
    #[arg(long)]
    chi: Option<String>,
    /// iPEPS bond dimension
    #[arg(long)]
    bond_d: Option<String>,
    /// CTM environment dimension
    #[arg(long)]
    chi_env: Option<String>,
    /// Steps per environment computation; a list for sweeps
    #[arg(long)]
    n_re: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    /// Total imaginary time, instead of --steps
    #[arg(long)]
    time: Option<String>,
    /// none, steps:N or energy:TOL
    #[arg(long)]
    warm_up: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// fu, su or both (ising2d)
    #[arg(long)]
    update: Option<String>,
    /// Worker threads for sweeps
    #[arg(long)]
    threads: Option<String>,
    /// Output directory for logs and summaries
    #[arg(long)]
    out: Option<String>,
    /// File to write the final state to
    #[arg(long)]
    checkpoint: Option<String>,
    /// Checkpoint to start from
    #[arg(long)]
    resume: Option<String>,
}

impl Flags {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let pairs = [
            ("model", &self.model),
            ("h", &self.h),
            ("delta", &self.delta),
            ("chi", &self.chi),
            ("bond_d", &self.bond_d),
            ("chi_env", &self.chi_env),
            ("n_re", &self.n_re),
            ("steps", &self.steps),
            ("time", &self.time),
            ("warm_up", &self.warm_up),
            ("seed", &self.seed),
            ("update", &self.update),
            ("threads", &self.threads),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
            ("resume", &self.resume),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        // a time flag replaces a file's step count and vice versa
        if self.time.is_some() && self.steps.is_none() {
            cfg.steps = None;
        }
        if self.steps.is_some() && self.time.is_none() {
            cfg.time = None;
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(flags) => {
            let s = harness::run(&flags.config()?)?;
            for e in &s.events {
                log::info!("{e}");
            }
            println!(
                "energy={:.10} mz={:.10} wall_seconds={:.3}",
                s.energy, s.mz, s.wall_seconds
            );
        }
        Command::Sweep(flags) => {
            let table = harness::sweep(&flags.config()?)?;
            table.write_csv(std::io::stdout().lock())?;
            for fit in table.timing_fits() {
                if let Some(f) = fit.fit {
                    eprintln!(
                        "h={} timing fit: {:.4} + {:.4} exp(-{:.4} n_re)",
                        fit.h, f.a, f.b, f.c
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
