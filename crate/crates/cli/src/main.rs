//! `alcor-sim`: runs one experiment family from a JSON config.

use std::path::PathBuf;
use std::process::ExitCode;

use alcor_core::exec::Exec;
use alcor_core::experiment::{execute, write_report, Command, Mode, RunConfig, UraKind};
use alcor_core::Error;
use clap::{Parser, ValueEnum};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;
const THREADS_VAR: &str = "ALCOR_SIM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "alcor-sim", version, about = "Time-sharing resource allocation experiments")]
struct Cli {
    #[arg(value_enum)]
    command: CommandArg,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out`, then `./out`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    ura: Option<UraArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// MLP checkpoint to load instead of training.
    #[arg(long)]
    policy_file: Option<PathBuf>,
    /// Exit with status 4 when the run does not converge.
    #[arg(long)]
    require_converged: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum CommandArg {
    UraBench,
    Run,
    Queue,
    Diagnostics,
    RateStudy,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum UraArg {
    Wmmse,
    Maxpower,
    Mlp,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Centralized,
    Distributed,
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(u) = cli.ura {
        cfg.ura.kind = match u {
            UraArg::Wmmse => UraKind::Wmmse,
            UraArg::Maxpower => UraKind::Maxpower,
            UraArg::Mlp => UraKind::Mlp,
        };
    }
    if let Some(m) = cli.mode {
        cfg.mode = match m {
            ModeArg::Centralized => Mode::Centralized,
            ModeArg::Distributed => Mode::Distributed,
        };
    }
    if let Some(p) = &cli.policy_file {
        cfg.ura.policy_file = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Io(_) | Error::Csv(_) => 1,
        _ => EXIT_CONFIG,
    }
}

fn thread_cap() -> Result<Option<usize>, Error> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        CommandArg::UraBench => Command::UraBench,
        CommandArg::Run => Command::Run,
        CommandArg::Queue => Command::Queue,
        CommandArg::Diagnostics => Command::Diagnostics,
        CommandArg::RateStudy => Command::RateStudy,
    };
    let result = thread_cap().and_then(|cap| {
        if let Some(n) = cap {
            // Only fails if a pool already exists, which cannot happen here.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        let cfg = resolve(&cli)?;
        let report = execute(command, &cfg, Exec::default())?;
        let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        write_report(&dir, &cfg, &report)?;
        Ok((report, dir))
    });
    match result {
        Ok((report, dir)) => {
            eprintln!(
                "{}: wrote {} ({})",
                command.name(),
                dir.display(),
                if report.converged { "converged" } else { "not converged" }
            );
            if cli.require_converged && !report.converged {
                return ExitCode::from(EXIT_NOT_CONVERGED);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("alcor-sim: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
