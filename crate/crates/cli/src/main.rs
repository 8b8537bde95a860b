mod config;
mod error;
mod report;
mod run;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rocktoken::reweight::Regime;

use crate::error::{CliError, EXIT_USAGE};
use crate::run::Stage;
use crate::stages::Inputs;

/// Rock token pipeline: simulate → detect → sweep → gradgeom → knockout → mask → train → report.
#[derive(Debug, Parser)]
#[command(name = "rocktoken", version)]
struct Cli {
    /// Config file (default: $ROCKTOKEN_CONFIG, else built-in defaults)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. --set detect.gamma=0.4 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Cap on worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory (default: runs/run-<unix time>-seed<seed>)
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the simulator and emit a trace with known planted rocks
    Simulate,
    /// Score token types and select the rock set
    Detect(#[command(flatten)] Inputs),
    /// Top-K stability sweep and cutoff choice
    Sweep(#[command(flatten)] Inputs),
    /// Gradient geometry and persistence by token group
    Gradgeom(#[command(flatten)] Inputs),
    /// Token and window knockouts on the simulator, with the census
    Knockout {
        #[command(flatten)]
        inputs: Inputs,
        /// Sweep output supplying the core K (default: <run>/sweep/sweep.json if present)
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Build window-aware loss masks
    Mask {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Train the simulator student under a mask regime
    Train {
        #[command(flatten)]
        inputs: Inputs,
        /// Mask file (default: <run>/mask/masks.jsonl if present)
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Consolidated report and plot-ready CSVs
    Report,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    match s {
        "baseline" => Ok(Regime::Baseline),
        "rock_freeze" => Ok(Regime::RockFreeze),
        "freq_matched_random" => Ok(Regime::FreqMatchedRandom),
        _ => Err(format!("unknown regime {s:?}; expected baseline, rock_freeze or freq_matched_random")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Detect(_) => "detect",
            Command::Sweep(_) => "sweep",
            Command::Gradgeom(_) => "gradgeom",
            Command::Knockout { .. } => "knockout",
            Command::Mask { .. } => "mask",
            Command::Train { .. } => "train",
            Command::Report => "report",
        }
    }
}

fn execute(cli: Cli) -> Result<PathBuf, CliError> {
    let resolved = config::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("cannot size thread pool: {e}")))?;
    }
    let run_dir = match cli.run_dir {
        Some(d) => d,
        None => {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            PathBuf::from("runs").join(format!("run-{secs}-seed{}", resolved.config.seed))
        }
    };
    let mut stage = Stage::open(&run_dir, cli.command.name(), &resolved)?;
    let seed = match &cli.command {
        Command::Simulate => stages::simulate(&mut stage)?,
        Command::Detect(i) => stages::detect(&mut stage, i)?,
        Command::Sweep(i) => stages::sweep(&mut stage, i)?,
        Command::Gradgeom(i) => stages::gradgeom(&mut stage, i)?,
        Command::Knockout { inputs, sweep } => stages::knockout(&mut stage, inputs, sweep.as_deref())?,
        Command::Mask { inputs, regime, lambda } => stages::mask(&mut stage, inputs, *regime, *lambda)?,
        Command::Train { inputs, masks } => stages::train_stage(&mut stage, inputs, masks.as_deref())?,
        Command::Report => report::report(&mut stage)?,
    };
    stage.finish(seed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match execute(cli) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
