mod check;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "crete", version, about = "Channel-gain map estimation with a cross-environment transformer")]
struct Cli {
    /// Config file; repeat to overlay several, later files win.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// `section.key=value` override, applied after config files.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Global seed; shorthand for `--set run.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory all paths are relative to.
    #[arg(long, global = true, env = "CRETE_WORKDIR", default_value = ".")]
    workdir: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Write the feature matrix of the first evaluation query to this CSV.
    #[arg(long, global = true)]
    dump_features: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate training and validation environments and measurement sets.
    GenData,
    /// Train the transformer on the generated data.
    Train,
    /// Select KNN and tomographic regularization parameters on validation data.
    FitBaseline,
    /// Single-model metrics on the test environments.
    Eval,
    /// Run a sweep and write its CSV.
    Experiment,
    /// Run the invariance, gradient and oracle self-checks.
    Check,
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    for path in &cli.config {
        let p = if path.is_absolute() { path.clone() } else { cli.workdir.join(path) };
        let text = std::fs::read_to_string(&p).map_err(CliError::file(&p))?;
        cfg.merge_text(&text, &p.display().to_string())?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = resolve(&cli)?;
    let ctx = commands::Context { workdir: cli.workdir.clone(), threads: cli.threads, dump_features: cli.dump_features.clone() };
    match cli.command {
        Command::GenData => commands::gen_data(&ctx, cfg),
        Command::Train => commands::train(&ctx, cfg),
        Command::FitBaseline => commands::fit_baseline(&ctx, cfg),
        Command::Eval => commands::eval(&ctx, cfg),
        Command::Experiment => commands::experiment(&ctx, cfg),
        Command::Check => check::run(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
