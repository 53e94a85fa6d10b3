//! `sitscf`: synthetic data, classifier and counterfactual training,
//! generation, evaluation and ablation from one JSON config.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{apply_override, RunConfig};
use failure::Failure;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "sitscf", version, about = "Time-localized counterfactual explanations for time-series classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON config, or a `run.json` to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (paths.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Input dataset CSV (paths.data).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Run seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// train.classifier.epochs
    #[arg(long, global = true)]
    clf_epochs: Option<usize>,
    /// train.adversarial.epochs
    #[arg(long, global = true)]
    adv_epochs: Option<usize>,
    /// train.loss_weights.lambda_gen
    #[arg(long, global = true)]
    lambda_gen: Option<f32>,
    /// train.loss_weights.lambda_wl1
    #[arg(long, global = true)]
    lambda_wl1: Option<f32>,
    /// eval.iforest.contamination
    #[arg(long, global = true)]
    contamination: Option<f64>,
    /// synth.n_per_class
    #[arg(long, global = true)]
    n_per_class: Option<usize>,
    /// Any config field, e.g. `--set train.adversarial.batch_size=64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic dataset.
    Synth,
    /// Train the classifier.
    TrainClassifier,
    /// Train the noiser and discriminator against the saved classifier.
    TrainCf,
    /// Write counterfactual pairs for the evaluation split.
    Generate,
    /// Transition matrix, perturbation statistics and plausibility.
    Evaluate,
    /// Train and evaluate the three loss variants.
    Ablate,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut doc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        };
        let mut sets = Vec::new();
        let mut flag = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{key}={v}"));
            }
        };
        let json_str = |p: &Option<PathBuf>| p.as_ref().map(|p| serde_json::Value::String(p.display().to_string()).to_string());
        flag("paths.out_dir", json_str(&self.out));
        flag("paths.data", json_str(&self.data));
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("train.classifier.epochs", self.clf_epochs.map(|v| v.to_string()));
        flag("train.adversarial.epochs", self.adv_epochs.map(|v| v.to_string()));
        flag("train.loss_weights.lambda_gen", self.lambda_gen.map(|v| v.to_string()));
        flag("train.loss_weights.lambda_wl1", self.lambda_wl1.map(|v| v.to_string()));
        flag("eval.iforest.contamination", self.contamination.map(|v| v.to_string()));
        flag("synth.n_per_class", self.n_per_class.map(|v| v.to_string()));
        sets.extend(self.overrides.iter().cloned());
        for s in &sets {
            apply_override(&mut doc, s)?;
        }
        RunConfig::from_value(doc)?.resolve()
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = cli.common.resolve()?;
    if cli.common.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::TrainClassifier => commands::train_clf(&cfg),
        Command::TrainCf => commands::train_cf(&cfg),
        Command::Generate => commands::generate(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Ablate => commands::ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sitscf: {e}");
            ExitCode::from(e.category.exit_code())
        }
    }
}
