//! `--config` TOML file and resolution of flag > config > default.

use std::path::Path;

use i2ce::model::{ModelConfig, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN_DIM};
use i2ce::objectives::{Aggregation, LossConfig};
use i2ce::scoring::Pooling;
use i2ce::text::{DEFAULT_MIN_FREQ, DEFAULT_T_MAX};
use i2ce::trainer::{Branch, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::args::{Precision, TrainArgs};
use crate::error::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub baselines: BaselinesSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub t_max: Option<usize>,
    pub min_freq: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub branch: Option<String>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub grad_clip: Option<f64>,
    pub precision: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub margin: Option<f64>,
    pub triplet_margin: Option<f64>,
    pub beta: Option<f64>,
    pub lambda_semantic: Option<f64>,
    pub lambda_rec: Option<f64>,
    pub aggregation: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub pool: Option<String>,
    pub format: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinesSection {
    pub cider_scale: Option<f64>,
    pub smoothing: Option<String>,
    pub format: Option<String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("reading config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::input(format!("config {}: {e}", path.display())))
    }
}

fn parse<T: std::str::FromStr>(what: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| CliError::input(format!("{what}: {e}")))
}

pub fn min_freq(flag: Option<usize>, cfg: &ConfigFile) -> usize {
    flag.or(cfg.model.min_freq).unwrap_or(DEFAULT_MIN_FREQ)
}

/// Fully resolved training settings.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub t_max: usize,
    pub min_freq: usize,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub precision: &'static str,
}

impl TrainSettings {
    pub fn resolve(a: &TrainArgs, cfg: &ConfigFile) -> Result<Self, CliError> {
        let (m, t, l) = (&cfg.model, &cfg.train, &cfg.loss);
        let td = TrainConfig::default();
        let ld = LossConfig::default();
        let branch = match a.branch.as_deref().or(t.branch.as_deref()) {
            Some(b) => parse::<Branch>("branch", b)?,
            None => td.branch,
        };
        let aggregation = match a.aggregation.as_deref().or(l.aggregation.as_deref()) {
            Some(s) => parse::<Aggregation>("aggregation", s)?,
            None => ld.aggregation,
        };
        let precision = match (a.precision, t.precision.as_deref()) {
            (Some(p), _) => p,
            (None, Some("f32")) => Precision::F32,
            (None, Some("f64")) | (None, None) => Precision::F64,
            (None, Some(other)) => {
                return Err(CliError::input(format!("precision: expected f32 or f64, got {other:?}")))
            }
        };
        let train = TrainConfig {
            branch,
            lr: a.lr.or(t.lr).unwrap_or(td.lr),
            batch_size: a.batch_size.or(t.batch_size).unwrap_or(td.batch_size),
            epochs: a.epochs.or(t.epochs).unwrap_or(td.epochs),
            seed: a.seed.or(t.seed).unwrap_or(td.seed),
            beta1: a.beta1.or(t.beta1).unwrap_or(td.beta1),
            beta2: a.beta2.or(t.beta2).unwrap_or(td.beta2),
            eps: a.eps.or(t.eps).unwrap_or(td.eps),
            grad_clip: a.grad_clip.or(t.grad_clip).unwrap_or(td.grad_clip),
        };
        train.validate().map_err(|e| CliError::input(e.to_string()))?;
        let loss = LossConfig {
            margin: a.margin.or(l.margin).unwrap_or(ld.margin),
            triplet_margin: a.triplet_margin.or(l.triplet_margin).unwrap_or(ld.triplet_margin),
            beta: a.beta.or(l.beta).unwrap_or(ld.beta),
            lambda_semantic: a.lambda_semantic.or(l.lambda_semantic).unwrap_or(ld.lambda_semantic),
            lambda_rec: a.lambda_rec.or(l.lambda_rec).unwrap_or(ld.lambda_rec),
            aggregation,
        };
        loss.validate().map_err(|e| CliError::input(e.to_string()))?;
        Ok(Self {
            embed_dim: a.model.embed_dim.or(m.embed_dim).unwrap_or(DEFAULT_EMBED_DIM),
            hidden_dim: a.model.hidden_dim.or(m.hidden_dim).unwrap_or(DEFAULT_HIDDEN_DIM),
            t_max: a.model.t_max.or(m.t_max).unwrap_or(DEFAULT_T_MAX),
            min_freq: min_freq(a.model.min_freq, cfg),
            train,
            loss,
            precision: match precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            },
        })
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            vocab_size,
            t_max: self.t_max,
        }
    }
}

pub fn pooling(flag: Option<&str>, cfg: &ConfigFile) -> Result<Pooling, CliError> {
    match flag.or(cfg.score.pool.as_deref()) {
        Some(p) => parse("pool", p),
        None => Ok(Pooling::default()),
    }
}

/// Value of a `ValueEnum` given either as a flag or as a config string.
pub fn enum_setting<E: clap::ValueEnum + Copy>(
    what: &str,
    flag: Option<E>,
    config: Option<&str>,
    default: E,
) -> Result<E, CliError> {
    match (flag, config) {
        (Some(v), _) => Ok(v),
        (None, Some(s)) => E::from_str(s, false).map_err(|e| CliError::input(format!("{what}: {e}"))),
        (None, None) => Ok(default),
    }
}

pub const DEFAULT_CIDER_SCALE: f64 = 10.0;
