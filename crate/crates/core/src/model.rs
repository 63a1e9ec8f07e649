//! GRU sentence auto-encoder.
//!
//! The encoder reads `BOS w1 .. wn EOS` and its hidden state after EOS is the
//! sentence's intrinsic vector. The decoder starts from that vector and is
//! trained with teacher forcing to predict `w1 .. wn EOS`. Encoder and decoder
//! have separate GRU weights and share the embedding table.
//!
//! Batches are processed row-wise: inputs are `batch×embed`, hidden states
//! `batch×hidden`. Rows whose sentence has already ended keep their hidden
//! state unchanged, so trailing padding never affects the result.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Real;
use crate::text::{TokenSeq, BOS, EOS};

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_HIDDEN_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("cannot encode an empty batch or sequence")]
    Empty,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected length {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// Maximum word count per sentence, BOS/EOS excluded.
    pub t_max: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.vocab_size == 0 || self.t_max == 0 {
            return Err(ModelError::Config(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The nine weight groups of one GRU: input weights are `hidden×embed`,
/// recurrent weights `hidden×hidden`, biases `1×hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T> {
    pub w_r: Tensor<T>,
    pub u_r: Tensor<T>,
    pub b_r: Tensor<T>,
    pub w_z: Tensor<T>,
    pub u_z: Tensor<T>,
    pub b_z: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_h: Tensor<T>,
}

const GRU_NAMES: [&str; 9] = ["w_r", "u_r", "b_r", "w_z", "u_z", "b_z", "w_h", "u_h", "b_h"];

impl<T: Real> GruParams<T> {
    pub fn zeros(embed: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(vec![hidden, embed]);
        let u = || Tensor::zeros(vec![hidden, hidden]);
        let b = || Tensor::zeros(vec![1, hidden]);
        Self {
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w_z: w(),
            u_z: u(),
            b_z: b(),
            w_h: w(),
            u_h: u(),
            b_h: b(),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.w_r, &self.u_r, &self.b_r, &self.w_z, &self.u_z, &self.b_z, &self.w_h,
            &self.u_h, &self.b_h,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }

    pub fn embed_dim(&self) -> usize {
        self.w_r.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_r.rows()
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> GruVars {
        let [w_r, u_r, b_r, w_z, u_z, b_z, w_h, u_h, b_h] = self.tensors().map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        GruVars {
            w_r,
            u_r,
            b_r,
            w_z,
            u_z,
            b_z,
            w_h,
            u_h,
            b_h,
        }
    }
}

/// Tape handles for one GRU's weights.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    fn all(&self) -> [Var; 9] {
        [
            self.w_r, self.u_r, self.b_r, self.w_z, self.u_z, self.b_z, self.w_h, self.u_h,
            self.b_h,
        ]
    }
}

fn affine<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul_nt(x, w)?;
    let hu = tape.matmul_nt(h, u)?;
    let s = tape.add(xw, hu)?;
    Ok(tape.add_row(s, b)?)
}

/// One GRU update on the tape for a batch of rows.
///
/// ```text
/// r  = σ(W_r x + U_r h + b_r)
/// z  = σ(W_z x + U_z h + b_z)
/// h* = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h*
/// ```
pub fn gru_step_on_tape<T: Real>(tape: &mut Tape<T>, p: &GruVars, x: Var, h: Var) -> Result<Var> {
    let r_pre = affine(tape, x, p.w_r, h, p.u_r, p.b_r)?;
    let r = tape.sigmoid(r_pre)?;
    let z_pre = affine(tape, x, p.w_z, h, p.u_z, p.b_z)?;
    let z = tape.sigmoid(z_pre)?;
    let rh = tape.mul(r, h)?;
    let cand_pre = affine(tape, x, p.w_h, rh, p.u_h, p.b_h)?;
    let cand = tape.tanh(cand_pre)?;
    let keep = tape.one_minus(z)?;
    let kept = tape.mul(keep, h)?;
    let fresh = tape.mul(z, cand)?;
    Ok(tape.add(kept, fresh)?)
}

/// Single GRU step on plain vectors.
pub fn gru_step<T: Real>(x: &[T], h_prev: &[T], p: &GruParams<T>) -> Result<Vec<T>> {
    check_len("gru input", p.embed_dim(), x.len())?;
    check_len("gru hidden state", p.hidden_dim(), h_prev.len())?;
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let xv = tape.constant(Tensor::row(x.to_vec()));
    let hv = tape.constant(Tensor::row(h_prev.to_vec()));
    let out = gru_step_on_tape(&mut tape, &vars, xv, hv)?;
    Ok(tape.value(out).data().to_vec())
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            what,
            expected,
            actual,
        })
    }
}

/// Sentence embedding: the encoder's hidden state after EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicVector<T>(pub Vec<T>);

impl<T: Real> IntrinsicVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> T {
        self.0.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub embedding: Var,
    pub encoder: GruVars,
    pub decoder: GruVars,
    pub out_weight: Var,
    pub out_bias: Var,
}

impl ModelVars {
    /// Handles in the same order as [`AutoEncoder::named_params`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embedding];
        v.extend(self.encoder.all());
        v.extend(self.decoder.all());
        v.push(self.out_weight);
        v.push(self.out_bias);
        v
    }
}

/// Teacher-forced decoder output: one logits node (`batch×vocab`) per target
/// position, with the gold id per row or `None` where the row has ended.
#[derive(Debug, Clone)]
pub struct DecoderSteps {
    pub logits: Vec<Var>,
    pub targets: Vec<Vec<Option<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder<T> {
    config: ModelConfig,
    pub embedding: Tensor<T>,
    pub encoder: GruParams<T>,
    pub decoder: GruParams<T>,
    /// `vocab×hidden` projection to logits.
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
}

impl<T: Real> AutoEncoder<T> {
    /// All-zero parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            embed_dim,
            hidden_dim,
            vocab_size,
            ..
        } = config;
        Ok(Self {
            config,
            embedding: Tensor::zeros(vec![vocab_size, embed_dim]),
            encoder: GruParams::zeros(embed_dim, hidden_dim),
            decoder: GruParams::zeros(embed_dim, hidden_dim),
            out_weight: Tensor::zeros(vec![vocab_size, hidden_dim]),
            out_bias: Tensor::zeros(vec![1, vocab_size]),
        })
    }

    /// Every parameter drawn from U(−1/√hidden, 1/√hidden).
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let bound = 1.0 / (config.hidden_dim as f64).sqrt();
        for (_, t) in model.named_params_mut() {
            for v in t.data_mut() {
                *v = T::lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter groups in their fixed serialization order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (prefix, gru) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (name, t) in GRU_NAMES.iter().zip(gru.tensors()) {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out.push(("output.weight".to_string(), &self.out_weight));
        out.push(("output.bias".to_string(), &self.out_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (prefix, gru) in [("encoder", &mut self.encoder), ("decoder", &mut self.decoder)] {
            for (name, t) in GRU_NAMES.iter().zip(gru.tensors_mut()) {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out.push(("output.weight".to_string(), &mut self.out_weight));
        out.push(("output.bias".to_string(), &mut self.out_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let leaf = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embedding = leaf(tape, &self.embedding);
        let encoder = self.encoder.bind(tape, trainable);
        let decoder = self.decoder.bind(tape, trainable);
        let out_weight = leaf(tape, &self.out_weight);
        let out_bias = leaf(tape, &self.out_bias);
        ModelVars {
            embedding,
            encoder,
            decoder,
            out_weight,
            out_bias,
        }
    }

    fn check_seq(&self, seq: &TokenSeq) -> Result<()> {
        if seq.len() < 2 {
            return Err(ModelError::Empty);
        }
        if let Some(&id) = seq.ids().iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Encodes a batch on the tape, returning the `batch×hidden` final states.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, vars: &ModelVars, seqs: &[TokenSeq]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(ModelError::Empty);
        }
        for s in seqs {
            self.check_seq(s)?;
        }
        let steps = seqs.iter().map(TokenSeq::len).max().unwrap_or(0);
        let mut h = tape.constant(Tensor::zeros(vec![seqs.len(), self.config.hidden_dim]));
        for t in 0..steps {
            let ids: Vec<usize> = seqs.iter().map(|s| s.at(t)).collect();
            let x = tape.gather_rows(vars.embedding, ids)?;
            let next = gru_step_on_tape(tape, &vars.encoder, x, h)?;
            let live: Vec<bool> = seqs.iter().map(|s| t < s.len()).collect();
            h = if live.iter().all(|&l| l) {
                next
            } else {
                tape.select_rows(live, next, h)?
            };
        }
        Ok(h)
    }

    /// Teacher-forced decoding from initial state `z` (`batch×hidden`).
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        z: Var,
        targets: &[TokenSeq],
    ) -> Result<DecoderSteps> {
        for s in targets {
            self.check_seq(s)?;
        }
        let steps = targets.iter().map(TokenSeq::len).max().unwrap_or(0);
        let mut h = z;
        let mut out = DecoderSteps {
            logits: Vec::with_capacity(steps.saturating_sub(1)),
            targets: Vec::with_capacity(steps.saturating_sub(1)),
        };
        for t in 1..steps {
            let prev: Vec<usize> = targets.iter().map(|s| s.at(t - 1)).collect();
            let x = tape.gather_rows(vars.embedding, prev)?;
            let next = gru_step_on_tape(tape, &vars.decoder, x, h)?;
            let live: Vec<bool> = targets.iter().map(|s| t < s.len()).collect();
            h = if live.iter().all(|&l| l) {
                next
            } else {
                tape.select_rows(live.clone(), next, h)?
            };
            out.logits.push(self.project(tape, vars, h)?);
            out.targets.push(
                targets
                    .iter()
                    .zip(&live)
                    .map(|(s, &l)| l.then(|| s.at(t)))
                    .collect(),
            );
        }
        Ok(out)
    }

    fn project(&self, tape: &mut Tape<T>, vars: &ModelVars, h: Var) -> Result<Var> {
        let logits = tape.matmul_nt(h, vars.out_weight)?;
        Ok(tape.add_row(logits, vars.out_bias)?)
    }

    pub fn encode(&self, seq: &TokenSeq) -> Result<IntrinsicVector<T>> {
        Ok(self.encode_batch(std::slice::from_ref(seq))?.remove(0))
    }

    pub fn encode_batch(&self, seqs: &[TokenSeq]) -> Result<Vec<IntrinsicVector<T>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let h = self.encode_on_tape(&mut tape, &vars, seqs)?;
        let value = tape.value(h);
        Ok((0..seqs.len())
            .map(|r| IntrinsicVector(value.row_slice(r).to_vec()))
            .collect())
    }

    /// Logit rows for target positions 1..len, shape `(len−1)×vocab`.
    pub fn decode_teacher_forced(&self, z: &IntrinsicVector<T>, target: &TokenSeq) -> Result<Tensor<T>> {
        check_len("intrinsic vector", self.config.hidden_dim, z.dim())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(Tensor::row(z.0.clone()));
        let steps = self.decode_on_tape(&mut tape, &vars, zv, std::slice::from_ref(target))?;
        let mut data = Vec::with_capacity(steps.logits.len() * self.config.vocab_size);
        for l in &steps.logits {
            data.extend_from_slice(tape.value(*l).data());
        }
        Ok(Tensor::matrix(steps.logits.len(), self.config.vocab_size, data)?)
    }

    /// Greedy autoregressive decoding from `z`. Emits at most `max_len`
    /// tokens and stops after EOS; ties go to the lowest id.
    pub fn decode_greedy(&self, z: &IntrinsicVector<T>, max_len: usize) -> Result<Vec<usize>> {
        check_len("intrinsic vector", self.config.hidden_dim, z.dim())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut h = tape.constant(Tensor::row(z.0.clone()));
        let mut prev = BOS;
        let mut out = Vec::new();
        while out.len() < max_len {
            let x = tape.gather_rows(vars.embedding, vec![prev])?;
            h = gru_step_on_tape(&mut tape, &vars.decoder, x, h)?;
            let logits = self.project(&mut tape, &vars, h)?;
            let row = tape.value(logits).data();
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(best);
            if best == EOS {
                break;
            }
            prev = best;
        }
        Ok(out)
    }
}
