//! Rank and linear correlation between paired score lists.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired samples, got {0}")]
    TooFew(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    /// The statistic is undefined, e.g. a constant input.
    #[error("{0} is undefined: {1}")]
    Degenerate(Statistic, &'static str),
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Kendall,
    Spearman,
    Pearson,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Self::Kendall, Self::Spearman, Self::Pearson];

    pub fn compute(self, xs: &[f64], ys: &[f64]) -> Result<f64> {
        match self {
            Self::Kendall => kendall_tau(xs, ys),
            Self::Spearman => spearman_rho(xs, ys),
            Self::Pearson => pearson_r(xs, ys),
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Kendall => "kendall",
            Self::Spearman => "spearman",
            Self::Pearson => "pearson",
        })
    }
}

impl FromStr for Statistic {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kendall" => Ok(Self::Kendall),
            "spearman" => Ok(Self::Spearman),
            "pearson" => Ok(Self::Pearson),
            other => Err(format!("unknown statistic {other:?}")),
        }
    }
}

fn check(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFew(xs.len()));
    }
    if let Some(i) = xs.iter().zip(ys).position(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(StatsError::NonFinite(i));
    }
    Ok(())
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that returns the number of inversions.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall tau-b, `(C − D) / √((n₀ − n₁)(n₀ − n₂))`, in `O(n log n)`.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check(xs, ys)?;
    let n = xs.len() as u64;
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = n * (n - 1) / 2;
    let xs_sorted: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs_sorted);
    // Pairs tied in both coordinates.
    let mut n3 = 0;
    let mut run = 1u64;
    for w in pairs.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            n3 += run * (run - 1) / 2;
            run = 1;
        }
    }
    n3 += run * (run - 1) / 2;

    let mut ys_sorted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys_sorted.len()];
    let swaps = sort_counting_swaps(&mut ys_sorted, &mut buf);
    let n2 = tied_pairs(&ys_sorted);

    if n0 == n1 {
        return Err(StatsError::Degenerate(Statistic::Kendall, "first input is constant"));
    }
    if n0 == n2 {
        return Err(StatsError::Degenerate(Statistic::Kendall, "second input is constant"));
    }
    let numer = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok(numer as f64 / denom)
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check(xs, ys)?;
    pearson_r(&average_ranks(xs), &average_ranks(ys)).map_err(|e| match e {
        StatsError::Degenerate(_, why) => StatsError::Degenerate(Statistic::Spearman, why),
        other => other,
    })
}

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::Degenerate(Statistic::Pearson, "first input has zero variance"));
    }
    if syy == 0.0 {
        return Err(StatsError::Degenerate(Statistic::Pearson, "second input has zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    pub pearson_r: f64,
    pub n: usize,
}

pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    Ok(CorrelationResult {
        kendall_tau: kendall_tau(xs, ys)?,
        spearman_rho: spearman_rho(xs, ys)?,
        pearson_r: pearson_r(xs, ys)?,
        n: xs.len(),
    })
}

/// Symmetric matrix of one statistic over metric columns. Undefined cells
/// are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub statistic: Statistic,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i][j]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Pairwise statistic between every pair of columns. Each off-diagonal
/// pair is computed once and mirrored; the diagonal is 1 unless the column
/// itself is degenerate.
pub fn correlation_matrix(columns: &[Vec<f64>], statistic: Statistic) -> Result<CorrelationMatrix> {
    let m = columns.len();
    if m < 2 {
        return Err(StatsError::TooFew(m));
    }
    for c in columns {
        check(&columns[0], c)?;
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect();
    let values: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| match statistic.compute(&columns[i], &columns[j]) {
            Ok(_) if i == j => Some(1.0),
            Ok(v) => Some(v),
            Err(_) => None,
        })
        .collect();
    let mut cells = vec![vec![None; m]; m];
    for (&(i, j), v) in pairs.iter().zip(values) {
        cells[i][j] = v;
        cells[j][i] = v;
    }
    Ok(CorrelationMatrix { statistic, cells })
}
