use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use fedblocks_core::config::{ExperimentConfig, RawConfig};
use fedblocks_core::experiment::run_to_dir;
use fedblocks_core::metrics::export_csv;
use fedblocks_core::sweep::{parse_values, sweep};
use fedblocks_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fedblocks", version, about = "Federated block coordinate descent simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write <out>/ledger.csv.
    Run {
        config: PathBuf,
        /// Output directory (defaults to output.dir, then the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides master_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the config once per value of one parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn out_dir(flag: Option<PathBuf>, cfg_dir: Option<&Path>) -> PathBuf {
    flag.or_else(|| cfg_dir.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Error> {
    let mut raw = RawConfig::from_file(config)?;
    if let Some(s) = seed {
        raw.set("master_seed", &s.to_string())?;
    }
    let mut cfg = ExperimentConfig::from_raw(&raw)?;
    let dir = out_dir(out, cfg.out_dir.as_deref());
    cfg.out_dir = Some(dir.clone());
    let ledger = run_to_dir(&cfg, &dir)?;
    let last = ledger.last().expect("ledger has the initial row");
    println!(
        "{} rounds, final loss {:.6e}, upload floats {}, ledger {}",
        last.round,
        last.train_loss,
        last.cumulative_upload_floats,
        dir.join("ledger.csv").display()
    );
    Ok(())
}

fn run_sweep(config: &Path, axis: &str, values: &str, out: Option<PathBuf>) -> Result<bool, Error> {
    let raw = RawConfig::from_file(config)?;
    let values = parse_values(values);
    let dir = out_dir(out, raw.get("output.dir").map(Path::new));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Validation(format!("cannot create {}: {e}", dir.display())))?;
    let runs = sweep(&raw, axis, &values)?;
    let mut all_ok = true;
    for run in runs {
        match run.ledger {
            Ok(ledger) => {
                let path = dir.join(format!("sweep_{axis}_{}.csv", run.value));
                export_csv(&ledger, &path)?;
                let last = ledger.last().expect("ledger has the initial row");
                println!("{axis}={}: ok, final loss {:.6e}, {}", run.value, last.train_loss, path.display());
            }
            Err(e) => {
                all_ok = false;
                println!("{axis}={}: failed: {e}", run.value);
            }
        }
    }
    info!("sweep over {axis} finished");
    Ok(all_ok)
}

fn validate(config: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_file(config)?;
    println!(
        "ok: rule {}, M={} S={} N={} R={} lambda={}",
        cfg.local.rule, cfg.clients, cfg.sample, cfg.blocks, cfg.rounds, cfg.lambda
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDBLOCKS_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => run(&config, out, seed).map(|()| true),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => run_sweep(&config, &axis, &values, out),
        Command::Validate { config } => validate(&config).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        // Some sweep values were rejected; the rest ran.
        Ok(false) => ExitCode::from(EXIT_CONFIG),
        Err(e) => exit_for(&e),
    }
}
