use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use couq_cli::commands::{eval_cmd, format_table, gen_synthetic_cmd, run_cmd, score_cmd};
use couq_cli::config::{parse_list, ExperimentConfig, Method};
use couq_cli::CliError;

/// Continual open-world novelty detection experiments over feature vectors.
#[derive(Debug, Parser)]
#[command(name = "couq", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as a feature file.
    GenSynthetic {
        #[arg(long)]
        config: PathBuf,
        /// `.feat` or `.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run methods over seeds and write reports and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated; overrides the config.
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated; overrides the config.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate the reports of a run directory.
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a feature file against a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, methods: Option<&str>, seeds: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(m) = methods {
        cfg.methods = parse_list::<Method>(m)?;
    }
    if let Some(s) = seeds {
        cfg.seeds = parse_list::<u64>(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::GenSynthetic { config, out, seed } => {
            let cfg = load_config(&config, None, None)?;
            let path = gen_synthetic_cmd(&cfg, seed, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Run {
            config,
            methods,
            seeds,
            out,
        } => {
            let cfg = load_config(&config, methods.as_deref(), seeds.as_deref())?;
            let reports = run_cmd(&cfg, &out)?;
            println!("{} runs written to {}", reports.len(), out.display());
        }
        Command::Eval { out } => {
            let rows = eval_cmd(&out)?;
            print!("{}", format_table(&rows));
        }
        Command::Score {
            checkpoint,
            features,
            out,
        } => {
            let n = score_cmd(&checkpoint, &features, &out)?;
            println!("scored {n} records into {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COUQ_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("couq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
