use std::path::PathBuf;
use std::process::ExitCode;

use cellfree_cli::{check_line, dispatch, parse_and_validate, resolve_output_dir, Command, Outcome, RunConfig, OUT_DIR_ENV};
use clap::{Parser, Subcommand};

/// Cell-free FBMC/OQAM downlink simulator.
#[derive(Parser)]
#[command(name = "cfsim", version)]
struct Args {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config file and $CFSIM_OUT_DIR.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the Monte Carlo trials.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Achievable rate against SNR.
    RateSweep,
    /// Achievable rate against subcarrier spacing.
    SpacingSweep,
    /// Time-domain bit error rate against Eb/N0.
    Ber,
    /// OFDM rate for every cyclic-prefix length.
    CpEnum,
    /// Quick structural checks of every module.
    Selftest,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cfsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(args: Args) -> cellfree_cli::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => parse_and_validate(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let env = std::env::var(OUT_DIR_ENV).ok();
    cfg.output_dir = resolve_output_dir(&cfg, args.out.as_deref(), env.as_deref());
    cfg.validate()?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(cmd) = args.command else {
        return Err(cellfree_cli::CliError::Invalid(
            "no subcommand given (rate-sweep, spacing-sweep, ber, cp-enum, selftest)".into(),
        ));
    };
    let cmd = match cmd {
        Cmd::RateSweep => Command::RateSweep,
        Cmd::SpacingSweep => Command::SpacingSweep,
        Cmd::Ber => Command::Ber,
        Cmd::CpEnum => Command::CpEnum,
        Cmd::Selftest => Command::Selftest,
    };
    let threads = args.threads.map(|n| n as usize);
    match dispatch(&cfg, cmd, threads) {
        Ok(Outcome::Selftest { checks, files }) => {
            for c in &checks {
                println!("{}", check_line(c));
            }
            list(&cfg, &files);
            Ok(())
        }
        Ok(Outcome::Report { report, files }) => {
            if cfg.verbosity >= 2 {
                print!("{}", report.summary_csv());
            }
            list(&cfg, &files);
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn list(cfg: &RunConfig, files: &[PathBuf]) {
    if cfg.verbosity >= 1 {
        for f in files {
            eprintln!("wrote {}", f.display());
        }
    }
}
