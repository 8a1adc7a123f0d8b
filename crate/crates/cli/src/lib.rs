//! Command-line harness for the crossing-intention models: synthetic data
//! generation, training, evaluation, the eight-variant ablation grid and
//! gradient checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod tables;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{Outcome, Status};
pub use config::RunConfig;
pub use error::{CliError, Result};

use config::SplitName;

#[derive(Debug, Parser)]
#[command(name = "crossing", version, about = "Pedestrian crossing-intention models")]
pub struct Cli {
    /// TOML run configuration. Flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for data generation, splits, initialization and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: a manifest plus context tensor files.
    GenData(GenDataArgs),
    /// Train one model; writes best and final checkpoints and the history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write a metrics report.
    Eval(EvalArgs),
    /// Train and test all eight grid variants on one shared split.
    Ablate(AblateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of tracks.
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Standard deviation of the noise on every channel.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Probability that a track is labeled crossing.
    #[arg(long)]
    pub positive_rate: Option<f64>,
    /// Width of the local and global context feature rows.
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Manifest file or dataset directory; synthetic data when omitted.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Passes over the training split.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Windows per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Grid variant to train (Ours, Ours1 .. Ours7).
    #[arg(long)]
    pub variant: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Partition to score.
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
    /// Probability at or above which a window counts as crossing.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Variants trained concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Frames per checked sequence.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.data.is_some() {
            cfg.data.path = self.data.clone();
        }
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.learning_rate, self.learning_rate);
        set(&mut cfg.train.batch_size, self.batch_size);
    }
}

impl Cli {
    /// Defaults, then the config file, then flags; validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        set(&mut cfg.seed, self.seed);
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        match &self.command {
            Command::GenData(a) => {
                set(&mut cfg.synth.n_samples, a.n_samples);
                set(&mut cfg.synth.noise_sigma, a.noise_sigma);
                set(&mut cfg.synth.positive_rate, a.positive_rate);
                set(&mut cfg.synth.feature_dim, a.feature_dim);
            }
            Command::Train(a) => {
                a.data.apply(&mut cfg);
                a.train.apply(&mut cfg);
                if a.variant.is_some() {
                    cfg.model.variant = a.variant.clone();
                }
            }
            Command::Eval(a) => {
                a.data.apply(&mut cfg);
                if a.checkpoint.is_some() {
                    cfg.eval.checkpoint = a.checkpoint.clone();
                }
                set(&mut cfg.eval.split, a.split);
                set(&mut cfg.eval.threshold, a.threshold);
            }
            Command::Ablate(a) => {
                a.data.apply(&mut cfg);
                a.train.apply(&mut cfg);
                set(&mut cfg.ablate.jobs, a.jobs);
            }
            Command::Gradcheck(a) => {
                set(&mut cfg.gradcheck.seq_len, a.seq_len);
                set(&mut cfg.gradcheck.feature_dim, a.feature_dim);
                set(&mut cfg.gradcheck.hidden_dim, a.hidden_dim);
            }
        }
        cfg.finish()
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = cli.resolve()?;
    match cli.command {
        Command::GenData(_) => commands::cmd_gen_data(&cfg),
        Command::Train(_) => commands::cmd_train(&cfg),
        Command::Eval(_) => commands::cmd_eval(&cfg),
        Command::Ablate(_) => commands::cmd_ablate(&cfg),
        Command::Gradcheck(_) => commands::cmd_gradcheck(&cfg),
    }
}
