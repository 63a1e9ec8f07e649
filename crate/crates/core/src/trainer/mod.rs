//! Adam training of the single, dual and triple branch configurations.
//!
//! All randomness comes from one ChaCha stream family seeded by
//! [`TrainConfig::seed`]: stream [`STREAM_INIT`] draws the initial weights,
//! stream [`STREAM_SHUFFLE`] the per-epoch batch order and triplet choices.

mod adam;
mod checkpoint;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::model::{AutoEncoder, ModelConfig, ModelError, ModelVars};
use crate::objectives::{margin_loss, overall_loss, reconstruction_loss, triplet_loss, LossConfig, LossError};
use crate::scalar::Real;
use crate::text::{
    epoch_dual_batches, epoch_sentence_batches, epoch_triplet_batches, CaptionGroup, TextError, TokenSeq,
    Vocab,
};

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{convert_model, Checkpoint, CheckpointError, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter group {group} at flat index {index}")]
    NonFiniteGradient { group: String, index: usize },
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        /// State at the end of the last completed epoch.
        last_good: Box<Checkpoint<f64>>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("writing loss log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Reconstruction only.
    Single,
    /// Reconstruction plus in-batch negative margin loss.
    #[default]
    Dual,
    /// Reconstruction plus triplet loss.
    Triple,
}

impl FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(Self::Single),
            "dual" => Ok(Self::Dual),
            "triple" => Ok(Self::Triple),
            other => Err(format!("unknown branch {other:?} (expected single, dual or triple)")),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Dual => "dual",
            Self::Triple => "triple",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub branch: Branch,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global L2 norm of the gradient.
    pub grad_clip: f64,
}

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            branch: Branch::default(),
            lr: adam.lr,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: DEFAULT_SEED,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            grad_clip: DEFAULT_GRAD_CLIP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.branch != Branch::Single && self.batch_size < 2 {
            return bad(format!("{} branch needs batch_size >= 2", self.branch));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("adam betas must lie in [0, 1): {} {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub rec_loss: f64,
    pub semantic_loss: Option<f64>,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,step,rec_loss,semantic_loss,total";

/// Writes the loss log as CSV. A missing semantic term is an empty field.
pub fn write_loss_log<W: Write>(mut w: W, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_LOG_HEADER}")?;
    for r in records {
        let semantic = r.semantic_loss.map(|s| s.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", r.epoch, r.step, r.rec_loss, semantic, r.total)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Single(Vec<TokenSeq>),
    Dual(crate::text::DualBatch),
    Triple(crate::text::TripletBatch),
}

/// Loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub rec: Var,
    pub semantic: Option<Var>,
    pub total: Var,
}

/// Records the full objective of `batch` on `tape`.
///
/// The branches share one parameter set; the triple branch encodes anchors,
/// similars and negatives as one stacked batch.
pub fn batch_loss<T: Real>(
    model: &AutoEncoder<T>,
    tape: &mut Tape<T>,
    vars: &ModelVars,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<BatchLoss, TrainError> {
    let (seqs, n): (Vec<TokenSeq>, usize) = match batch {
        Batch::Single(s) => (s.clone(), s.len()),
        Batch::Dual(b) => (b.anchors.clone(), b.len()),
        Batch::Triple(b) => {
            let mut all = b.anchors.clone();
            all.extend(b.similars.iter().cloned());
            all.extend(b.negatives.iter().cloned());
            (all, b.len())
        }
    };
    let z = model.encode_on_tape(tape, vars, &seqs)?;
    let steps = model.decode_on_tape(tape, vars, z, &seqs)?;
    let rec = reconstruction_loss(tape, &steps.logits, &steps.targets)?;
    let semantic = match batch {
        Batch::Single(_) => None,
        // A batch closed early on a repeated group may hold one anchor.
        Batch::Dual(_) if n < 2 => None,
        Batch::Dual(_) => Some(margin_loss(tape, z, cfg)?),
        Batch::Triple(_) => {
            let a = tape.gather_rows(z, (0..n).collect())?;
            let s = tape.gather_rows(z, (n..2 * n).collect())?;
            let neg = tape.gather_rows(z, (2 * n..3 * n).collect())?;
            Some(triplet_loss(tape, a, s, neg, cfg)?)
        }
    };
    let total = overall_loss(tape, semantic, rec, cfg)?;
    Ok(BatchLoss { rec, semantic, total })
}

/// Summary of one finished epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_rec: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<LossRecord>,
}

/// Stateful training loop; [`train`] drives it for the configured epochs.
pub struct Trainer<T> {
    model: AutoEncoder<T>,
    vocab: Vocab,
    groups: Vec<CaptionGroup>,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
    log: Vec<LossRecord>,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        groups: Vec<CaptionGroup>,
        vocab: Vocab,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        loss_cfg: LossConfig,
    ) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        loss_cfg.validate()?;
        if model_cfg.vocab_size != vocab.len() {
            return Err(TrainError::Config(format!(
                "model vocab_size {} differs from vocabulary size {}",
                model_cfg.vocab_size,
                vocab.len()
            )));
        }
        if groups.is_empty() {
            return Err(TextError::EmptyCorpus.into());
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        init_rng.set_stream(STREAM_INIT);
        let model = AutoEncoder::init(model_cfg, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        rng.set_stream(STREAM_SHUFFLE);
        let trainer = Self {
            adam: AdamState::new(model.named_params().into_iter().map(|(_, t)| t)),
            model,
            vocab,
            groups,
            train_cfg,
            loss_cfg,
            rng,
            epoch: 0,
            step: 0,
            log: Vec::new(),
        };
        // Surface branch preconditions (distinct groups, multi-reference
        // groups) before any training happens.
        trainer.batches(&mut trainer.rng.clone())?;
        Ok(trainer)
    }

    pub fn model(&self) -> &AutoEncoder<T> {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            train_config: self.train_cfg.clone(),
            loss_config: self.loss_cfg,
            epoch: self.epoch,
            rng: self.rng_state(),
        }
    }

    fn batches(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Batch>, TrainError> {
        let n = self.train_cfg.batch_size;
        Ok(match self.train_cfg.branch {
            Branch::Single => epoch_sentence_batches(&self.groups, n, rng)
                .into_iter()
                .map(Batch::Single)
                .collect(),
            Branch::Dual => epoch_dual_batches(&self.groups, n, rng)?
                .into_iter()
                .map(Batch::Dual)
                .collect(),
            Branch::Triple => epoch_triplet_batches(&self.groups, n, rng)?
                .into_iter()
                .map(Batch::Triple)
                .collect(),
        })
    }

    fn diverged(&self, last_good: &Checkpoint<T>, reason: String) -> TrainError {
        TrainError::Diverged {
            epoch: self.epoch + 1,
            step: self.step,
            reason,
            last_good: Box::new(Checkpoint {
                model: convert_model(&last_good.model),
                vocab: last_good.vocab.clone(),
                train_config: last_good.train_config.clone(),
                loss_config: last_good.loss_config,
                epoch: last_good.epoch,
                rng: last_good.rng.clone(),
            }),
        }
    }

    /// Runs one pass over the corpus and returns its mean losses.
    pub fn run_epoch(&mut self) -> Result<EpochSummary, TrainError> {
        let last_good = self.checkpoint();
        let mut rng = self.rng.clone();
        let batches = self.batches(&mut rng)?;
        self.rng = rng;
        let adam_cfg = self.train_cfg.adam();
        let (mut sum_rec, mut sum_total) = (0.0, 0.0);
        for batch in &batches {
            self.step += 1;
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, true);
            let loss = batch_loss(&self.model, &mut tape, &vars, batch, &self.loss_cfg)?;
            let record = LossRecord {
                epoch: self.epoch + 1,
                step: self.step,
                rec_loss: tape.value(loss.rec).item()?.as_f64(),
                semantic_loss: match loss.semantic {
                    Some(s) => Some(tape.value(s).item()?.as_f64()),
                    None => None,
                },
                total: tape.value(loss.total).item()?.as_f64(),
            };
            if !record.total.is_finite() {
                return Err(self.diverged(&last_good, format!("loss is {}", record.total)));
            }
            tape.backward(loss.total)?;
            let mut grads: Vec<Tensor<T>> = vars
                .all()
                .into_iter()
                .map(|v| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
                })
                .collect();
            clip_global_norm(&mut grads, self.train_cfg.grad_clip);
            let mut params = self.model.named_params_mut();
            if let Err(e) = adam_step(&mut params, &grads, &mut self.adam, &adam_cfg) {
                drop(params);
                return Err(self.diverged(&last_good, e.to_string()));
            }
            sum_rec += record.rec_loss;
            sum_total += record.total;
            self.log.push(record);
        }
        self.epoch += 1;
        let steps = batches.len();
        Ok(EpochSummary {
            epoch: self.epoch,
            steps,
            mean_rec: sum_rec / steps.max(1) as f64,
            mean_total: sum_total / steps.max(1) as f64,
        })
    }

    /// Runs the remaining configured epochs.
    pub fn run(mut self) -> Result<TrainOutcome<T>, TrainError> {
        while self.epoch < self.train_cfg.epochs {
            self.run_epoch()?;
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            log: self.log,
        })
    }
}

/// Trains a fresh model on pre-encoded caption groups.
pub fn train<T: Real>(
    groups: Vec<CaptionGroup>,
    vocab: Vocab,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    Trainer::new(groups, vocab, model_cfg, train_cfg, loss_cfg)?.run()
}
