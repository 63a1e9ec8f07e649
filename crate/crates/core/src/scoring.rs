//! Candidate caption scoring against reference groups.
//!
//! A candidate's similarity to a reference is the cosine of their intrinsic
//! vectors. The per-reference similarities are pooled by averaging the `k`
//! largest (max-k pooling).

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AutoEncoder, IntrinsicVector, ModelError};
use crate::objectives::{cosine, LossError};
use crate::scalar::Real;
use crate::text::{CaptionGroup, TextError, TokenSeq, Vocab, MAX_REFERENCES};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("candidate caption has no words")]
    EmptyCandidate,
    #[error("cannot pool an empty list of similarities")]
    EmptySimilarities,
    #[error("no reference group for image {0}")]
    MissingReferences(String),
    #[error("invalid pooling {0:?} (expected max1 .. max5)")]
    Pooling(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Text(#[from] TextError),
}

pub type Result<T> = std::result::Result<T, ScoringError>;

/// Max-k pooling: mean of the `k` largest similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pooling(usize);

impl Pooling {
    pub const DEFAULT_K: usize = 3;

    pub fn max_k(k: usize) -> Result<Self> {
        if (1..=MAX_REFERENCES).contains(&k) {
            Ok(Self(k))
        } else {
            Err(ScoringError::Pooling(format!("max{k}")))
        }
    }

    pub fn k(self) -> usize {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Pooling> {
        (1..=MAX_REFERENCES).map(Pooling)
    }
}

impl Default for Pooling {
    fn default() -> Self {
        Self(Self::DEFAULT_K)
    }
}

impl FromStr for Pooling {
    type Err = ScoringError;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("max")
            .and_then(|k| k.parse().ok())
            .ok_or_else(|| ScoringError::Pooling(s.to_string()))
            .and_then(Self::max_k)
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "max{}", self.0)
    }
}

impl Serialize for Pooling {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pooling {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Cosine similarity of two sentences' intrinsic vectors.
pub fn sim<T: Real>(model: &AutoEncoder<T>, a: &TokenSeq, b: &TokenSeq) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(ScoringError::EmptyCandidate);
    }
    let z = model.encode_batch(&[a.clone(), b.clone()])?;
    vector_sim(&z[0], &z[1])
}

pub fn vector_sim<T: Real>(a: &IntrinsicVector<T>, b: &IntrinsicVector<T>) -> Result<T> {
    Ok(cosine(a.as_slice(), b.as_slice())?)
}

/// Mean of the `k` largest values, `k` clamped to the list length.
pub fn pool<T: Real>(sims: &[T], mode: Pooling) -> Result<T> {
    if sims.is_empty() {
        return Err(ScoringError::EmptySimilarities);
    }
    let mut sorted = sims.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let k = mode.k().min(sorted.len());
    Ok(sorted[..k].iter().copied().sum::<T>() / T::lit(k as f64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(deserialize_with = "crate::text::string_or_int")]
    pub image_id: String,
    pub caption: String,
}

/// Reads a JSON array of `{"image_id", "caption"}` records.
pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<Candidate>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_candidates(&text)
}

pub fn parse_candidates(json: &str) -> Result<Vec<Candidate>> {
    serde_json::from_str(json).map_err(|e| ScoringError::Text(e.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub image_id: String,
    /// Raw cosine per reference, in reference order.
    pub similarities: Vec<f64>,
    pub pooling: Pooling,
    /// Pooled raw cosine.
    pub pooled: f64,
    /// `pooled × 100`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    /// Position in the candidate list.
    pub index: usize,
    pub image_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub pooling: Pooling,
    pub scored: usize,
    pub skipped: usize,
    /// Mean pooled cosine × 100; `None` when nothing was scored.
    pub corpus_score: Option<f64>,
    pub corpus_mean_raw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRun {
    pub reports: Vec<ScoreReport>,
    pub errors: Vec<ItemError>,
    pub summary: ScoreSummary,
}

/// Order-independent mean: values are summed in sorted order so any
/// permutation of the input gives the same bits.
pub fn stable_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

/// Scores every candidate against the reference group of its image.
///
/// Items without a reference group, with an empty caption or with a
/// degenerate embedding are recorded in [`ScoreRun::errors`] and skipped.
pub fn score_candidates<T: Real>(
    model: &AutoEncoder<T>,
    vocab: &Vocab,
    candidates: &[Candidate],
    references: &[CaptionGroup],
    pooling: Pooling,
) -> ScoreRun {
    let t_max = model.config().t_max;
    let index: HashMap<&str, usize> = references
        .iter()
        .enumerate()
        .map(|(i, g)| (g.image_id.as_str(), i))
        .collect();
    let needed: Vec<usize> = {
        let mut v: Vec<usize> = candidates
            .iter()
            .filter_map(|c| index.get(c.image_id.as_str()).copied())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let encoded: HashMap<usize, std::result::Result<Vec<IntrinsicVector<T>>, String>> = needed
        .par_iter()
        .map(|&g| {
            let z = model
                .encode_batch(&references[g].references)
                .map_err(|e| e.to_string());
            (g, z)
        })
        .collect();

    let results: Vec<std::result::Result<ScoreReport, ItemError>> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, cand)| {
            let fail = |message: String| ItemError {
                index: i,
                image_id: cand.image_id.clone(),
                message,
            };
            let g = *index
                .get(cand.image_id.as_str())
                .ok_or_else(|| fail(ScoringError::MissingReferences(cand.image_id.clone()).to_string()))?;
            let refs = encoded[&g].as_ref().map_err(|e| fail(e.clone()))?;
            let seq = vocab.encode(&cand.caption, t_max);
            if seq.is_empty() {
                return Err(fail(ScoringError::EmptyCandidate.to_string()));
            }
            let z = model.encode(&seq).map_err(|e| fail(e.to_string()))?;
            let sims = refs
                .iter()
                .map(|r| vector_sim(&z, r))
                .collect::<Result<Vec<T>>>()
                .map_err(|e| fail(e.to_string()))?;
            let pooled = pool(&sims, pooling).map_err(|e| fail(e.to_string()))?.as_f64();
            Ok(ScoreReport {
                image_id: cand.image_id.clone(),
                similarities: sims.iter().map(|s| s.as_f64()).collect(),
                pooling,
                pooled,
                score: pooled * 100.0,
            })
        })
        .collect();

    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => errors.push(e),
        }
    }
    let pooled: Vec<f64> = reports.iter().map(|r| r.pooled).collect();
    let mean = stable_mean(&pooled);
    ScoreRun {
        summary: ScoreSummary {
            pooling,
            scored: reports.len(),
            skipped: errors.len(),
            corpus_score: mean.map(|m| m * 100.0),
            corpus_mean_raw: mean,
        },
        reports,
        errors,
    }
}

/// One JSON object per report, then one per item error, then the summary.
pub fn write_jsonl<W: Write>(mut w: W, run: &ScoreRun) -> std::io::Result<()> {
    #[derive(Serialize)]
    #[serde(tag = "type", rename_all = "lowercase")]
    enum Line<'a> {
        Report(&'a ScoreReport),
        Error(&'a ItemError),
        Summary(&'a ScoreSummary),
    }
    let lines = run
        .reports
        .iter()
        .map(Line::Report)
        .chain(run.errors.iter().map(Line::Error))
        .chain(std::iter::once(Line::Summary(&run.summary)));
    for line in lines {
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

/// `image_id<TAB>pooled<TAB>s1..s5`, raw cosines, no header.
pub fn write_tsv<W: Write>(mut w: W, run: &ScoreRun) -> std::io::Result<()> {
    for r in &run.reports {
        write!(w, "{}\t{}", r.image_id, r.pooled)?;
        for s in &r.similarities {
            write!(w, "\t{s}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
