//! Command line front end for the transferability laboratory.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use atlab::LabError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "atlab", version, about = "Class-aware adversarial transferability laboratory")]
pub struct Cli {
    /// Experiment configuration (flat `key = value` file).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    #[arg(long, default_value = "pgd")]
    pub family: String,
    #[arg(long, default_value = "non-targeted")]
    pub objective: String,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    /// Iterations; defaults to the family's preset.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Step length; defaults to epsilon / 5 for iterative attacks.
    #[arg(long)]
    pub step_size: Option<f64>,
    /// MIM momentum decay.
    #[arg(long)]
    pub momentum: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write its checkpoint and metadata.
    Train {
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "Conv-2")]
        preset: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Attack test images with one model and store the adversarial batch.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
        /// Leading test images to attack.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value = "adv")]
        stem: String,
    },
    /// Build an eligible set and report transfer outcomes.
    TransferEval {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long, default_value_t = 2000)]
        sample_n: usize,
        /// Persist the eligible set as well.
        #[arg(long)]
        save_set: bool,
    },
    /// Decision-boundary distance between two models.
    Dist {
        #[arg(long)]
        f1: PathBuf,
        #[arg(long)]
        f2: PathBuf,
        #[arg(long, default_value_t = 1000)]
        images: usize,
    },
    /// Label map of a model on a plane through one test image.
    BoundaryGrid {
        #[arg(long)]
        source: PathBuf,
        /// Second model for the outcome overlay.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        image: usize,
        #[arg(long, default_value_t = atlab::geometry::GRID_UNIT)]
        unit: f64,
        #[arg(long, default_value_t = atlab::geometry::GRID_HALF_EXTENT)]
        half_extent: usize,
        #[arg(long, default_value_t = atlab::geometry::GRID_RESOLUTION)]
        resolution: usize,
    },
    /// Build the two relabeled non-robust training sets.
    NonrobustBuild {
        #[arg(long)]
        f1: PathBuf,
        #[arg(long)]
        f2: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        step_size: f64,
        #[arg(long, default_value_t = 1)]
        replication: usize,
        /// Leading training images to attack; 0 means all.
        #[arg(long, default_value_t = 0)]
        train_n: usize,
    },
    /// Train a fresh model on a stored non-robust set and score it on clean data.
    NonrobustTrain {
        /// Directory holding the set.
        #[arg(long)]
        dir: PathBuf,
        /// File stem printed by `nonrobust-build`.
        #[arg(long)]
        stem: String,
        #[arg(long, default_value = "Conv-2")]
        preset: String,
        #[arg(long)]
        epochs: Option<usize>,
        /// Defaults to 256.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Replace the labels with uniform random ones.
        #[arg(long)]
        random_labels: bool,
        /// Keep only items whose attack hit both models.
        #[arg(long)]
        filtered: bool,
    },
    /// Vanilla versus ensemble targeted attack outcome tables.
    EnsembleCompare {
        #[arg(long)]
        source: PathBuf,
        /// Models added to the source in the ensemble attack.
        #[arg(long, value_delimiter = ',', required = true)]
        extra: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 2000)]
        sample_n: usize,
    },
    /// Closed-form versus Monte-Carlo sweep of the linear Gaussian model.
    TheorySim {
        #[arg(long, value_delimiter = ',', default_values_t = vec![10, 100, 1000])]
        d: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.11, 0.3])]
        eta: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
    },
    /// Run every task of the configuration.
    Run,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<LabError>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
