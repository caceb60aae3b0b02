use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use noiselab::config::RunConfig;
use noiselab::par::{self, ExecMode};
use noiselab::pipeline::{self, RunDir};
use noiselab::Error;

#[derive(Debug, Parser)]
#[command(name = "noiselab", version, about = "Noise-robust slot filling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory; overrides `paths.output`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the synthetic train/test corpora.
    GenData,
    /// Build the augmented corpus, vocabulary and test suites.
    Perturb,
    /// Run noise-alignment pre-training.
    Pretrain,
    /// Fine-tune the slot tagger.
    Finetune,
    /// Score the fine-tuned model on every suite.
    Evaluate,
    /// Train and score each ablation variant.
    Ablate,
    /// gen-data, perturb, pretrain, finetune and evaluate in order.
    All,
}

enum Failure {
    Usage(String),
    Run(Error),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation { .. } => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Usage("--config is required".into()))?;
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    let mut cfg = RunConfig::load(path).map_err(Failure::Run)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.output {
        cfg.paths.output = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let threads = par::init_threads();
    let mode = ExecMode::auto();
    let dir = RunDir::new(&cfg.paths.output);
    info!("run directory {} ({threads} threads, config {})", dir.root.display(), &cfg.hash()[..12]);
    let res = match cli.command {
        Command::GenData => pipeline::stage_gen_data(&cfg, &dir).map(drop),
        Command::Perturb => pipeline::stage_perturb(&cfg, &dir, mode).map(drop),
        Command::Pretrain => pipeline::stage_pretrain(&cfg, &dir, mode).map(drop),
        Command::Finetune => pipeline::stage_finetune(&cfg, &dir, mode).map(drop),
        Command::Evaluate => pipeline::stage_evaluate(&cfg, &dir, mode).map(|(_, single, mixed)| {
            if !cli.quiet {
                print!("{}", single.to_table());
                print!("{}", mixed.to_table());
            }
        }),
        Command::Ablate => pipeline::stage_ablate(&cfg, &dir, mode).map(|(_, reports)| {
            if !cli.quiet {
                print!("{}", noiselab::eval::ablation_table(&reports));
            }
        }),
        Command::All => pipeline::stage_all(&cfg, &dir, mode).map(|(single, mixed)| {
            if !cli.quiet {
                print!("{}", single.to_table());
                print!("{}", mixed.to_table());
            }
        }),
    };
    res.map_err(Failure::Run)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[usage]: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            // keep the error on one line for scripts
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}
