use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semood::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "semood", version, about = "Multi-embedding OOD detection experiments")]
struct Cli {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; re-derives every component seed not set explicitly.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test and OOD splits.
    GenData,
    /// Generate synthetic embedding spaces.
    GenEmbeddings,
    /// Train every model the config requests.
    Train,
    /// OOD detection report, score dumps and histograms.
    EvalOod,
    /// FGSM transfer attack and agreement detectors.
    EvalAdv,
    /// Taxonomy relatedness of misclassifications.
    EvalSemantic,
    /// Write the run manifest.
    Report,
    /// All stages in order.
    Run,
    /// Print the resolved configuration.
    Config,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::parse("")?,
    };
    match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => Ok(cfg),
    }
}

fn list(out: &Path, artifacts: &[PathBuf]) {
    for a in artifacts {
        println!("{}", out.join(a).display());
    }
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let cfg = load(cli)?;
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out)?;
    let stage = match cli.command {
        Command::GenData => experiment::gen_data,
        Command::GenEmbeddings => experiment::gen_embeddings,
        Command::Train => experiment::train_models,
        Command::EvalOod => experiment::eval_ood,
        Command::EvalAdv => experiment::eval_adv,
        Command::EvalSemantic => experiment::eval_semantic,
        Command::Config => {
            print!("{}", cfg.canonical());
            println!("# hash {}", cfg.hash());
            return Ok(());
        }
        Command::Report | Command::Run => {
            let manifest = if matches!(cli.command, Command::Run) {
                experiment::run_experiment(&cfg, out)?
            } else {
                experiment::report(&cfg, out)?
            };
            print!("{}", manifest.to_text());
            return Ok(());
        }
    };
    list(out, &stage(&cfg, out)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
