//! Training objectives and the cosine primitives they share with scoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("margin loss needs at least 2 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("reconstruction targets cover no tokens")]
    NoTargets,
    #[error("invalid loss config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// How the per-anchor hinge terms over in-batch negatives are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean over every ordered (anchor, negative) pair.
    #[default]
    Mean,
    /// Hardest negative per anchor, then mean over anchors.
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown aggregation {other:?} (expected mean or max)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Margin of the in-batch negative hinge.
    pub margin: f64,
    /// Margin of the triplet hinge.
    pub triplet_margin: f64,
    /// Threshold of the negative-pair cosine distance.
    pub beta: f64,
    pub lambda_semantic: f64,
    pub lambda_rec: f64,
    pub aggregation: Aggregation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            triplet_margin: 0.2,
            beta: 0.0,
            lambda_semantic: 1.0,
            lambda_rec: 1.0,
            aggregation: Aggregation::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LossError::Config(msg));
        if !(self.margin > 0.0) {
            return bad(format!("margin must be > 0, got {}", self.margin));
        }
        if !(self.triplet_margin > 0.0) {
            return bad(format!("triplet margin must be > 0, got {}", self.triplet_margin));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.lambda_semantic >= 0.0 && self.lambda_rec >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.lambda_semantic == 0.0 && self.lambda_rec == 0.0 {
            return bad("loss weights cannot both be zero".into());
        }
        Ok(())
    }
}

/// Whether a pair is meant to be similar (+1) or dissimilar (−1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(a.len(), b.len()));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(LossError::ZeroVector);
    }
    Ok(dot / (na * nb))
}

/// `1 − cos` for similar pairs, `max(0, cos − β)` for dissimilar ones.
pub fn cosine_distance<T: Real>(a: &[T], b: &[T], label: PairLabel, beta: T) -> Result<T> {
    let c = cosine(a, b)?;
    Ok(match label {
        PairLabel::Similar => T::one() - c,
        PairLabel::Dissimilar => (c - beta).max(T::zero()),
    })
}

/// Token-averaged negative log-likelihood of the gold ids.
///
/// `logits[t]` is a `batch×vocab` node and `targets[t][i]` the gold id of
/// row `i` at step `t`, `None` for padded positions.
pub fn reconstruction_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    targets: &[Vec<Option<usize>>],
) -> Result<Var> {
    let count: usize = targets.iter().flatten().filter(|t| t.is_some()).count();
    if count == 0 || logits.len() != targets.len() {
        return Err(LossError::NoTargets);
    }
    let mut total: Option<Var> = None;
    for (&l, t) in logits.iter().zip(targets) {
        let ce = tape.cross_entropy(l, t.clone())?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let total = total.expect("at least one step");
    Ok(tape.scale(total, T::one() / T::lit(count as f64))?)
}

/// In-batch negative hinge over the rows of `anchors` (`N×hidden`, each row
/// from a different caption group).
///
/// For every ordered pair `(a, a')`, `a ≠ a'`, the term is
/// `[m − (1 − cos(a, a'))]₊`, i.e. negatives are penalised once their
/// cosine distance falls below the margin.
pub fn margin_loss<T: Real>(tape: &mut Tape<T>, anchors: Var, cfg: &LossConfig) -> Result<Var> {
    let n = tape.value(anchors).rows();
    if n < 2 {
        return Err(LossError::TooFewAnchors(n));
    }
    let cos = tape.cosine_matrix(anchors, anchors)?;
    let shifted = tape.add_scalar(cos, T::lit(cfg.margin) - T::one())?;
    let hinge = tape.relu(shifted)?;
    let mut mask = Tensor::filled(vec![n, n], T::one());
    for i in 0..n {
        mask.data_mut()[i * n + i] = T::zero();
    }
    let mask = tape.constant(mask);
    let off_diag = tape.mul(hinge, mask)?;
    Ok(match cfg.aggregation {
        Aggregation::Mean => {
            let s = tape.sum(off_diag)?;
            tape.scale(s, T::one() / T::lit((n * (n - 1)) as f64))?
        }
        Aggregation::Max => {
            let hardest = tape.row_max(off_diag)?;
            tape.mean(hardest)?
        }
    })
}

/// Mean over rows of `[α + d(a, s) − d(a, n)]₊` with `d = 1 − cos`.
pub fn triplet_loss<T: Real>(
    tape: &mut Tape<T>,
    anchors: Var,
    similars: Var,
    negatives: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let cos_as = tape.row_cosine(anchors, similars)?;
    let cos_an = tape.row_cosine(anchors, negatives)?;
    let d_as = tape.one_minus(cos_as)?;
    let d_an = tape.one_minus(cos_an)?;
    let gap = tape.sub(d_as, d_an)?;
    let shifted = tape.add_scalar(gap, T::lit(cfg.triplet_margin))?;
    let hinge = tape.relu(shifted)?;
    Ok(tape.mean(hinge)?)
}

/// `λ₁·semantic + λ₂·rec`. A missing semantic term counts as zero.
pub fn overall_loss<T: Real>(
    tape: &mut Tape<T>,
    semantic: Option<Var>,
    rec: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let weighted_rec = tape.scale(rec, T::lit(cfg.lambda_rec))?;
    Ok(match semantic {
        Some(s) => {
            let weighted = tape.scale(s, T::lit(cfg.lambda_semantic))?;
            tape.add(weighted, weighted_rec)?
        }
        None => weighted_rec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    }

    fn plain_cos(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    fn eval_margin(rows: &[Vec<f64>], cfg: &LossConfig) -> f64 {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(rows).unwrap());
        let l = margin_loss(&mut tape, z, cfg).unwrap();
        tape.value(l).item().unwrap()
    }

    fn eval_triplet(a: &[Vec<f64>], s: &[Vec<f64>], n: &[Vec<f64>], cfg: &LossConfig) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(a).unwrap());
        let s = tape.constant(Tensor::from_rows(s).unwrap());
        let n = tape.constant(Tensor::from_rows(n).unwrap());
        let l = triplet_loss(&mut tape, a, s, n, cfg).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn cosine_distance_cases() {
        let a = [1.0f64, 2.0, 3.0];
        assert!(cosine_distance(&a, &a, PairLabel::Similar, 0.0).unwrap().abs() < 1e-15);
        assert_eq!(
            cosine_distance(&[1.0, 0.0], &[0.0, 3.0], PairLabel::Similar, 0.0).unwrap(),
            1.0
        );
        // cos = 0.9
        let b = [0.9, 0.19f64.sqrt()];
        let d = cosine_distance(&[1.0, 0.0], &b, PairLabel::Dissimilar, 0.0).unwrap();
        assert!((d - 0.9).abs() < 1e-15);
        let d = cosine_distance(&[1.0, 0.0], &b, PairLabel::Dissimilar, 0.95).unwrap();
        assert_eq!(d, 0.0);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(LossError::ZeroVector)
        ));
    }

    #[test]
    fn reconstruction_loss_limits() {
        let mut tape = Tape::<f64>::new();
        let mut row = vec![-50.0; 9];
        row[4] = 50.0;
        let l = tape.constant(Tensor::from_rows(&[row]).unwrap());
        let loss = reconstruction_loss(&mut tape, &[l], &[vec![Some(4)]]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::zeros(vec![2, 9]));
        let loss = reconstruction_loss(&mut tape, &[u, u], &[vec![Some(1), Some(2)], vec![Some(3), None]])
            .unwrap();
        assert!((tape.value(loss).item().unwrap() - 9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_loss_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let steps: Vec<Vec<Vec<f64>>> = (0..3).map(|_| rand_rows(&mut rng, 4, 7)).collect();
        let targets: Vec<Vec<Option<usize>>> = vec![
            vec![Some(1), Some(6), Some(0), Some(3)],
            vec![Some(2), None, Some(5), Some(3)],
            vec![None, None, Some(4), Some(2)],
        ];
        let mut tape = Tape::new();
        let logits: Vec<Var> = steps
            .iter()
            .map(|s| tape.constant(Tensor::from_rows(s).unwrap()))
            .collect();
        let loss = reconstruction_loss(&mut tape, &logits, &targets).unwrap();

        let mut total = 0.0;
        let mut count = 0.0;
        for (s, t) in steps.iter().zip(&targets) {
            for (row, gold) in s.iter().zip(t) {
                if let Some(g) = gold {
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    total += -(row[*g].exp() / z).ln();
                    count += 1.0;
                }
            }
        }
        assert!((tape.value(loss).item().unwrap() - total / count).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_hinge_cases() {
        let cfg = LossConfig::default();
        // orthogonal negatives: distance 1 ≥ m
        assert_eq!(eval_margin(&[vec![1.0, 0.0], vec![0.0, 1.0]], &cfg), 0.0);
        // opposite negatives: distance 2
        assert_eq!(eval_margin(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &cfg), 0.0);
        // identical negatives: distance 0, full margin
        let l = eval_margin(&[vec![1.0, 2.0], vec![2.0, 4.0]], &cfg);
        assert!((l - 0.2).abs() < 1e-12);
        assert!(matches!(
            {
                let mut tape = Tape::<f64>::new();
                let z = tape.constant(Tensor::row(vec![1.0, 0.0]));
                margin_loss(&mut tape, z, &cfg)
            },
            Err(LossError::TooFewAnchors(1))
        ));
    }

    #[test]
    fn margin_loss_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Near-parallel rows so that several hinges are active.
        let base: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| base.iter().map(|b| b + rng.gen_range(-0.15..0.15)).collect())
            .collect();
        let cfg = LossConfig::default();
        let mut terms = vec![vec![0.0; 4]; 4];
        let mut sum = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let d = 1.0 - plain_cos(&rows[i], &rows[j]);
                    terms[i][j] = (cfg.margin - d).max(0.0);
                    sum += terms[i][j];
                }
            }
        }
        assert!(terms.iter().flatten().any(|&t| t > 0.0));
        assert!((eval_margin(&rows, &cfg) - sum / 12.0).abs() < 1e-12);

        let max_cfg = LossConfig {
            aggregation: Aggregation::Max,
            ..cfg
        };
        let hardest: f64 = terms
            .iter()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / 4.0;
        assert!((eval_margin(&rows, &max_cfg) - hardest).abs() < 1e-12);
    }

    #[test]
    fn triplet_loss_cases() {
        let cfg = LossConfig::default();
        let a = vec![vec![1.0, 0.0]];
        // d(a,s) = 0, d(a,n) = 1 ≥ α
        assert_eq!(eval_triplet(&a, &a, &[vec![0.0, 1.0]], &cfg), 0.0);
        // d(a,s) = d(a,n)
        let l = eval_triplet(&a, &[vec![1.0, 1.0]], &[vec![1.0, -1.0]], &cfg);
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn triplet_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = rand_rows(&mut rng, 6, 5);
        let s = rand_rows(&mut rng, 6, 5);
        let n = rand_rows(&mut rng, 6, 5);
        let cfg = LossConfig {
            triplet_margin: 0.5,
            ..LossConfig::default()
        };
        let mut sum = 0.0;
        for i in 0..6 {
            let d_as = 1.0 - plain_cos(&a[i], &s[i]);
            let d_an = 1.0 - plain_cos(&a[i], &n[i]);
            sum += (0.5 + d_as - d_an).max(0.0);
        }
        assert!((eval_triplet(&a, &s, &n, &cfg) - sum / 6.0).abs() < 1e-12);
    }

    #[test]
    fn overall_loss_weights() {
        let mut tape = Tape::<f64>::new();
        let sem = tape.param(Tensor::scalar(0.3));
        let rec = tape.param(Tensor::scalar(2.0));
        let cfg = LossConfig::default();
        let l = overall_loss(&mut tape, Some(sem), rec, &cfg).unwrap();
        assert!((tape.value(l).item().unwrap() - 2.3).abs() < 1e-15);

        let only_rec = LossConfig {
            lambda_semantic: 0.0,
            ..cfg
        };
        let l = overall_loss(&mut tape, Some(sem), rec, &only_rec).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 2.0);

        let doubled = LossConfig {
            lambda_semantic: 2.0,
            lambda_rec: 2.0,
            ..cfg
        };
        let l1 = overall_loss(&mut tape, Some(sem), rec, &cfg).unwrap();
        tape.backward(l1).unwrap();
        let g1 = (tape.grad(sem).unwrap().data()[0], tape.grad(rec).unwrap().data()[0]);
        tape.zero_grad();
        let l2 = overall_loss(&mut tape, Some(sem), rec, &doubled).unwrap();
        tape.backward(l2).unwrap();
        let g2 = (tape.grad(sem).unwrap().data()[0], tape.grad(rec).unwrap().data()[0]);
        assert_eq!(tape.value(l2).item().unwrap(), 2.0 * tape.value(l1).item().unwrap());
        assert_eq!((2.0 * g1.0, 2.0 * g1.1), g2);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = [
            LossConfig { margin: 0.0, ..Default::default() },
            LossConfig { triplet_margin: -1.0, ..Default::default() },
            LossConfig { beta: 1.0, ..Default::default() },
            LossConfig { lambda_semantic: 0.0, lambda_rec: 0.0, ..Default::default() },
            LossConfig { lambda_rec: -1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn losses_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let rows = rand_rows(&mut rng, 5, 4);
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * 3.7).collect())
            .collect();
        let cfg = LossConfig { margin: 1.2, ..LossConfig::default() };
        assert!((eval_margin(&rows, &cfg) - eval_margin(&scaled, &cfg)).abs() < 1e-12);
        let t1 = eval_triplet(&rows[..2], &rows[2..4], &rows[3..5], &cfg);
        let t2 = eval_triplet(&scaled[..2], &scaled[2..4], &scaled[3..5], &cfg);
        assert!((t1 - t2).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences_off_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let base: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| base.iter().map(|b| b + rng.gen_range(-0.5..0.5)).collect())
            .collect();
        for aggregation in [Aggregation::Mean, Aggregation::Max] {
            let cfg = LossConfig { margin: 0.3, triplet_margin: 0.3, aggregation, ..Default::default() };
            let mut tape = Tape::new();
            let z = tape.param(Tensor::from_rows(&rows).unwrap());
            let za = tape.param(Tensor::from_rows(&rows[..2]).unwrap());
            let zs = tape.param(Tensor::from_rows(&rows[2..4]).unwrap());
            let zn = tape.param(Tensor::from_rows(&rows[3..5]).unwrap());
            let m = margin_loss(&mut tape, z, &cfg).unwrap();
            let t = triplet_loss(&mut tape, za, zs, zn, &cfg).unwrap();
            let total = tape.add(m, t).unwrap();
            tape.backward(total).unwrap();
            for leaf in [z, za, zs, zn] {
                let analytic = tape.grad(leaf).unwrap().data().to_vec();
                let base = tape.value(leaf).clone();
                for i in 0..base.len() {
                    let eps = 1e-4;
                    let mut p = base.clone();
                    p.data_mut()[i] += eps;
                    tape.set_value(leaf, p).unwrap();
                    tape.replay().unwrap();
                    let fp = tape.value(total).item().unwrap();
                    let mut q = base.clone();
                    q.data_mut()[i] -= eps;
                    tape.set_value(leaf, q).unwrap();
                    tape.replay().unwrap();
                    let fq = tape.value(total).item().unwrap();
                    tape.set_value(leaf, base.clone()).unwrap();
                    tape.replay().unwrap();
                    let numeric = (fp - fq) / (2.0 * eps);
                    let tol = f64::max(1e-4, 1e-3 * numeric.abs());
                    assert!((analytic[i] - numeric).abs() <= tol, "{aggregation:?}: {} vs {numeric}", analytic[i]);
                }
            }
        }
    }
}
