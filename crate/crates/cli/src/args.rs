use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "ccead",
    version,
    about = "Typo correction and completion with a character encoder and word decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate a noise model from typo pairs and build an aligned noisy corpus
    BuildNoise(BuildNoiseArgs),
    /// Inject noise into a clean corpus with a saved noise model
    Inject(InjectArgs),
    /// Generate keyboard-noise word pairs split into train/dev/test files
    GenSynthetic(GenSyntheticArgs),
    /// Build a word vocabulary from a clean corpus
    BuildVocab(BuildVocabArgs),
    /// Train a model from a run configuration
    Train(TrainArgs),
    /// Score a model (or the identity baseline) on a noisy/clean corpus
    Eval(EvalArgs),
    /// Correct text with a trained model
    Correct(CorrectArgs),
    /// Serve corrections over HTTP
    Serve(ServeArgs),
    /// Write the character or word embedding table as TSV
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Dict,
    Sampled,
}

impl From<Mode> for ccead_core::noise::InjectMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Dict => Self::Dict,
            Mode::Sampled => Self::Sampled,
        }
    }
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    /// Model checkpoint
    #[arg(long, env = "CCEAD_CHECKPOINT")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildNoiseArgs {
    /// `typo<TAB>correction` pairs
    #[arg(long)]
    pub typos: PathBuf,
    /// Clean text, one sentence per line
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "dict")]
    pub mode: Mode,
    /// Replacement probability per dictionary word (dict) or target CER (sampled)
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only lines whose words all appear in this word list
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// train,dev,test fractions
    #[arg(long, default_value = "0.9,0.05,0.05", value_delimiter = ',')]
    pub split: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    /// Clean text, one sentence per line
    #[arg(long)]
    pub corpus: PathBuf,
    /// Noise model written by `build-noise`
    #[arg(long)]
    pub noise_model: PathBuf,
    #[arg(long, value_enum, default_value = "sampled")]
    pub mode: Mode,
    #[arg(long, default_value_t = 0.1)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Word list; the bundled 300 most frequent English words when absent
    #[arg(long)]
    pub words: Option<PathBuf>,
    /// Touch jitter standard deviation in key pitches
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Noisy renderings per word
    #[arg(long, default_value_t = 27)]
    pub variants: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "0.8,0.1,0.1", value_delimiter = ',')]
    pub split: Vec<f64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary size including the four reserved tokens
    #[arg(long, default_value_t = 50_000)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (`key=value` lines); relative paths resolve against its directory
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Word window override
    #[arg(long)]
    pub window: Option<usize>,
    /// Output checkpoint override
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Extra `key=value` overrides
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "CCEAD_CHECKPOINT", required_unless_present = "identity")]
    pub checkpoint: Option<PathBuf>,
    /// Score the noisy input itself instead of a model
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub noisy: PathBuf,
    #[arg(long)]
    pub clean: PathBuf,
    /// Word window; defaults to the model's, or whole lines for --identity
    #[arg(long)]
    pub window: Option<usize>,
    /// Number of context labels for a uniform context model in the smooth CER
    #[arg(long)]
    pub context_labels: Option<usize>,
    /// Also write the per-position CER table here
    #[arg(long)]
    pub positions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// Text to correct; lines from standard input when absent
    pub text: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub max_completions: usize,
    /// Print the full JSON response
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Per-request decode budget before answering 503
    #[arg(long, default_value_t = 2000)]
    pub timeout_ms: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// Export character embeddings instead of word embeddings
    #[arg(long)]
    pub chars: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
