use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use umeta::commands;
use umeta::config::RunConfig;
use umeta::{Error, Result};

/// Unsupervised task construction and few-shot meta-learning.
#[derive(Parser)]
#[command(name = "umeta", version)]
struct Cli {
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, env = "UMETA_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Run {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// `--key=value` overrides, applied after the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture dataset.
    Synth(Run),
    /// Partition the meta-train rows.
    Partition(Run),
    /// Pre-generate labeled evaluation tasks.
    GenTasks(Run),
    /// Meta-train MAML or ProtoNets on partition-derived tasks.
    MetaTrain(Run),
    /// Evaluate a learner or baseline on the stored tasks.
    Evaluate(Run),
    /// Rank evaluation reports that share a task set.
    Compare {
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load(run: &Run) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&run.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn workers(cli: &Cli, cfg: Option<&RunConfig>) -> Result<usize> {
    match cli.workers {
        Some(n) => Ok(n),
        None => cfg.map_or(Ok(0), |c| c.get("workers")),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.command {
        Command::Compare { .. } => None,
        Command::Synth(r)
        | Command::Partition(r)
        | Command::GenTasks(r)
        | Command::MetaTrain(r)
        | Command::Evaluate(r) => Some(load(r)?),
    };
    let n = workers(&cli, cfg.as_ref())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    match (&cli.command, cfg) {
        (Command::Synth(_), Some(cfg)) => {
            let out = commands::cmd_synth(&cfg)?;
            println!("wrote {}", out.display());
        }
        (Command::Partition(_), Some(cfg)) => {
            let files = commands::cmd_partition(&cfg)?;
            println!("wrote {} partitions", files.len());
        }
        (Command::GenTasks(_), Some(cfg)) => {
            let out = commands::cmd_gen_tasks(&cfg)?;
            println!("wrote {}", out.display());
        }
        (Command::MetaTrain(_), Some(cfg)) => {
            let out = commands::cmd_meta_train(&cfg)?;
            println!("wrote {}", out.display());
        }
        (Command::Evaluate(_), Some(cfg)) => {
            let report = commands::cmd_evaluate(&cfg)?;
            println!("{}", report.summary());
        }
        (Command::Compare { out, reports }, _) => {
            let table = commands::cmd_compare(reports)?;
            match out {
                Some(path) => std::fs::write(path, table).map_err(|e| Error::io(path, e))?,
                None => print!("{table}"),
            }
        }
        _ => unreachable!("config loaded for every run command"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
