use std::path::PathBuf;

use cdds_core::objectives::{LossWeights, ModalForm, SemanticForm};
use cdds_core::trainer::{Ablation, CorrelationMode, TrainConfig};
use cdds_core::{Aggregation, DecouplerConfig, SyntheticConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliResult;
use crate::profile::Profile;

#[derive(Debug, Parser)]
#[command(
    name = "cdds",
    version,
    about = "Decoupled cross-modal embedding alignment",
    args_conflicts_with_subcommands = true,
    arg_required_else_help = true
)]
pub struct Cli {
    /// Re-run the job recorded in a run manifest.
    #[arg(long, value_name = "MANIFEST")]
    pub from_manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train and test containers.
    GenSynth(GenSynthArgs),
    /// Train a model and write a checkpoint plus metrics.
    Train(TrainArgs),
    /// Retrieval recalls of a checkpoint on a test container.
    Eval(EvalArgs),
    /// Train the full model and every single-component ablation, then compare.
    Ablate(AblateArgs),
    /// Per-batch time of the three correlation modes.
    BenchModes(BenchArgs),
    /// Dump correlation scores, masks, thresholds and 2-D projections.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, value_enum, default_value_t)]
    pub profile: Profile,
    /// Training pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub test_pairs: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d_latent: Option<usize>,
    /// Patches per image.
    #[arg(long)]
    pub n_v: Option<usize>,
    /// Words per text.
    #[arg(long)]
    pub n_t: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub texts_per_image: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

impl GenSynthArgs {
    /// Generator settings for train and test together, plus the test count.
    pub fn resolve(&self) -> (SyntheticConfig, usize) {
        let p = self.profile.defaults();
        let train = self.pairs.unwrap_or(p.train_pairs);
        let test = self.test_pairs.unwrap_or(p.test_pairs);
        let cfg = SyntheticConfig {
            n_pairs: train + test,
            n_v: self.n_v.unwrap_or(p.n_v),
            n_t: self.n_t.unwrap_or(p.n_t),
            d: self.d.unwrap_or(p.d),
            d_latent: self.d_latent.unwrap_or(p.d_latent),
            texts_per_image: self.texts_per_image,
            noise_std: self.noise,
            seed: self.seed,
            ..SyntheticConfig::default()
        };
        (cfg, test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SemanticArg {
    Literal,
    Infonce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalArg {
    Consistency,
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    #[default]
    PatchToWord,
    Symmetric,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::PatchToWord => Aggregation::PatchToWord,
            AggregationArg::Symmetric => Aggregation::Symmetric,
        }
    }
}

/// Training hyper-parameters; unset values come from the profile.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t)]
    pub profile: Profile,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Noise draws per item.
    #[arg(long, default_value_t = 4)]
    pub z: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    /// each-batch, random or all.
    #[arg(long, default_value = "each-batch")]
    pub mode: CorrelationMode,
    #[arg(long, value_enum, default_value = "literal")]
    pub semantic_form: SemanticArg,
    /// InfoNCE temperature.
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, value_enum, default_value = "consistency")]
    pub modal_form: ModalArg,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_s: f64,
    #[arg(long, default_value_t = 0.1)]
    pub alpha_m: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha_f: f64,
    #[arg(long, default_value_t = cdds_core::semalign::DEFAULT_BINS)]
    pub bins: usize,
    /// Initial sparsity parameter.
    #[arg(long, default_value_t = 1.0)]
    pub alpha_init: f64,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

impl ModelArgs {
    pub fn config(&self, d: usize, ablations: &[Ablation]) -> CliResult<TrainConfig> {
        let p = self.profile.defaults();
        let semantic_form = match self.semantic_form {
            SemanticArg::Literal => SemanticForm::Literal,
            SemanticArg::Infonce => SemanticForm::InfoNce { temperature: self.temperature },
        };
        let modal_form = match self.modal_form {
            ModalArg::Consistency => ModalForm::Consistency,
            ModalArg::Literal => ModalForm::Literal,
        };
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(p.epochs),
            batch_size: self.batch_size.unwrap_or(p.batch_size),
            learning_rate: self.lr.unwrap_or(p.learning_rate),
            weight_decay: self.weight_decay,
            seed: self.seed,
            decoupler: DecouplerConfig {
                n_layers: self.n_layers.unwrap_or(p.n_layers),
                z: self.z,
                noise_std: self.noise_std,
                d,
            },
            weights: LossWeights { alpha_s: self.alpha_s, alpha_m: self.alpha_m, alpha_f: self.alpha_f },
            semantic_form,
            modal_form,
            correlation_mode: self.mode,
            ablations: ablations.iter().copied().collect(),
            bins: self.bins,
            alpha_init: self.alpha_init,
            max_steps: self.max_steps,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training container; defaults to the latest gen-synth run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Components to switch off, comma separated (dec, mod, int, gau, sam).
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<Ablation>,
    /// Continue from a checkpoint, keeping its configuration except
    /// `--epochs` and `--max-steps`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Defaults to the latest train run.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test container; defaults to test.cdds next to the training data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub aggregation: AggregationArg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Defaults to the latest gen-synth run.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Concurrent sub-runs.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub aggregation: AggregationArg,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Container to time on; synthetic data of width `--d` otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub pairs: usize,
    /// Timed steps per mode.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}
