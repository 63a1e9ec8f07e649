use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Learned caption evaluation: vocabulary, training, scoring, baseline
/// metrics and correlation analysis.
///
/// Every flag can also be set through an `I2CE_*` environment variable or a
/// TOML file passed with `--config`. Precedence: flag, then environment,
/// then config file, then built-in default.
#[derive(Debug, Parser)]
#[command(name = "i2ce", version, term_width = 0)]
pub struct Cli {
    /// TOML file with `[model]`, `[train]`, `[loss]`, `[score]` and
    /// `[baselines]` tables.
    #[arg(long, global = true, env = "I2CE_CONFIG")]
    pub config: Option<PathBuf>,

    /// Worker threads for scoring, baselines and correlation
    /// [default: all cores].
    #[arg(long, global = true, env = "I2CE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from a caption corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a sentence auto-encoder and write a checkpoint.
    Train(TrainArgs),
    /// Score candidate captions against reference groups.
    Score(ScoreArgs),
    /// Compute BLEU-1..4, ROUGE-L and CIDEr-D for candidate captions.
    Baselines(BaselinesArgs),
    /// Correlate metric columns of a score table.
    Correlate(CorrelateArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Corpus: JSON `[{"image_id", "captions": [..]}]` or one caption per line.
    #[arg(long, env = "I2CE_CORPUS")]
    pub corpus: PathBuf,
    /// Minimum token count for inclusion [default: 5].
    #[arg(long, env = "I2CE_MIN_FREQ")]
    pub min_freq: Option<usize>,
    /// Output vocabulary (JSON).
    #[arg(long, env = "I2CE_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Word embedding size [default: 256].
    #[arg(long, env = "I2CE_EMBED_DIM")]
    pub embed_dim: Option<usize>,
    /// GRU hidden size, also the intrinsic vector size [default: 512].
    #[arg(long, env = "I2CE_HIDDEN_DIM")]
    pub hidden_dim: Option<usize>,
    /// Maximum words per sentence; longer captions are truncated [default: 20].
    #[arg(long, env = "I2CE_T_MAX")]
    pub t_max: Option<usize>,
    /// Minimum token count when building the vocabulary [default: 5].
    #[arg(long, env = "I2CE_MIN_FREQ")]
    pub min_freq: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus (same formats as build-vocab).
    #[arg(long, env = "I2CE_CORPUS")]
    pub corpus: PathBuf,
    /// Prebuilt vocabulary; built from the corpus when absent.
    #[arg(long, env = "I2CE_VOCAB")]
    pub vocab: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long, env = "I2CE_OUT")]
    pub out: PathBuf,
    /// Per-step loss CSV [default: <out>.loss.csv].
    #[arg(long, env = "I2CE_LOSS_LOG")]
    pub loss_log: Option<PathBuf>,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Training configuration: single (reconstruction), dual (+ in-batch
    /// margin loss) or triple (+ triplet loss) [default: dual].
    #[arg(long, env = "I2CE_BRANCH")]
    pub branch: Option<String>,
    /// Adam learning rate [default: 5e-4].
    #[arg(long, env = "I2CE_LR")]
    pub lr: Option<f64>,
    /// Sentences (dual: anchors, triple: triplets) per batch [default: 128].
    #[arg(long, env = "I2CE_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    /// Passes over the corpus [default: 30].
    #[arg(long, env = "I2CE_EPOCHS")]
    pub epochs: Option<usize>,
    /// Seed for weight init and batch order [default: 42].
    #[arg(long, env = "I2CE_SEED")]
    pub seed: Option<u64>,
    /// Adam first-moment decay [default: 0.9].
    #[arg(long, env = "I2CE_BETA1")]
    pub beta1: Option<f64>,
    /// Adam second-moment decay [default: 0.999].
    #[arg(long, env = "I2CE_BETA2")]
    pub beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8].
    #[arg(long, env = "I2CE_EPS")]
    pub eps: Option<f64>,
    /// Maximum global gradient L2 norm [default: 5].
    #[arg(long, env = "I2CE_GRAD_CLIP")]
    pub grad_clip: Option<f64>,

    /// Margin of the in-batch negative loss [default: 0.2].
    #[arg(long, env = "I2CE_MARGIN")]
    pub margin: Option<f64>,
    /// Margin of the triplet loss [default: 0.2].
    #[arg(long, env = "I2CE_TRIPLET_MARGIN")]
    pub triplet_margin: Option<f64>,
    /// Negative-pair cosine threshold [default: 0].
    #[arg(long, env = "I2CE_BETA")]
    pub beta: Option<f64>,
    /// Weight of the semantic loss [default: 1].
    #[arg(long, env = "I2CE_LAMBDA_SEMANTIC")]
    pub lambda_semantic: Option<f64>,
    /// Weight of the reconstruction loss [default: 1].
    #[arg(long, env = "I2CE_LAMBDA_REC")]
    pub lambda_rec: Option<f64>,
    /// In-batch negative aggregation: mean or max [default: mean].
    #[arg(long, env = "I2CE_AGGREGATION")]
    pub aggregation: Option<String>,

    /// Arithmetic precision used during training [default: f64].
    #[arg(long, value_enum, env = "I2CE_PRECISION")]
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreFormat {
    Json,
    Tsv,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Candidates: JSON `[{"image_id", "caption"}]`.
    #[arg(long, env = "I2CE_CANDIDATES")]
    pub candidates: PathBuf,
    /// Reference corpus (same formats as build-vocab).
    #[arg(long, env = "I2CE_REFERENCES")]
    pub references: PathBuf,
    /// Trained checkpoint.
    #[arg(long, env = "I2CE_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Pooling over reference similarities, max1 .. max5 [default: max3].
    #[arg(long, env = "I2CE_POOL")]
    pub pool: Option<String>,
    /// Output format [default: json].
    #[arg(long, value_enum, env = "I2CE_FORMAT")]
    pub format: Option<ScoreFormat>,
    /// Output file [default: stdout].
    #[arg(long, env = "I2CE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SmoothingArg {
    None,
    AddOne,
}

#[derive(Debug, Args)]
pub struct BaselinesArgs {
    /// Candidates: JSON `[{"image_id", "caption"}]`.
    #[arg(long, env = "I2CE_CANDIDATES")]
    pub candidates: PathBuf,
    /// Reference corpus; also the document-frequency corpus for CIDEr-D.
    #[arg(long, env = "I2CE_REFERENCES")]
    pub references: PathBuf,
    /// Output format; csv is directly usable by `correlate` [default: json].
    #[arg(long, value_enum, env = "I2CE_FORMAT")]
    pub format: Option<BaselineFormat>,
    /// Output file [default: stdout].
    #[arg(long, env = "I2CE_OUT")]
    pub out: Option<PathBuf>,
    /// Document-frequency cache, reused when built from the same references.
    #[arg(long, env = "I2CE_DF_CACHE")]
    pub df_cache: Option<PathBuf>,
    /// Multiplier applied to CIDEr-D [default: 10].
    #[arg(long, env = "I2CE_CIDER_SCALE")]
    pub cider_scale: Option<f64>,
    /// Sentence-level BLEU smoothing [default: add-one].
    #[arg(long, value_enum, env = "I2CE_SMOOTHING")]
    pub smoothing: Option<SmoothingArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Against {
    /// Every metric against the `human` column.
    Human,
    /// Full metric-by-metric matrices.
    All,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Score table: CSV `item_id,metric1,metric2,..`.
    #[arg(long, env = "I2CE_SCORES")]
    pub scores: PathBuf,
    /// What to correlate [default: all].
    #[arg(long, value_enum, env = "I2CE_AGAINST")]
    pub against: Option<Against>,
    /// Directory for the output CSV tables.
    #[arg(long, env = "I2CE_OUT_DIR")]
    pub out_dir: PathBuf,
}
