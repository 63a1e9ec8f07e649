//! CIDEr-D: tf-idf weighted n-gram cosine with count clipping and a
//! Gaussian length penalty.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ngram_counts, BaselineError, Ngram, Result, MAX_N};

pub const DF_CACHE_MAGIC: [u8; 4] = *b"I2DF";
pub const DF_CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiderConfig {
    /// Width of the length penalty `exp(−Δ²/2σ²)`.
    pub sigma: f64,
}

impl Default for CiderConfig {
    fn default() -> Self {
        Self { sigma: 6.0 }
    }
}

/// Hash identifying a tokenized reference corpus, including group
/// boundaries and order.
pub fn corpus_hash<S: AsRef<str>>(groups: &[Vec<Vec<S>>]) -> [u8; 32] {
    let mut h = Sha256::new();
    for g in groups {
        h.update((g.len() as u64).to_le_bytes());
        for r in g {
            h.update((r.len() as u64).to_le_bytes());
            for t in r {
                let t = t.as_ref().as_bytes();
                h.update((t.len() as u64).to_le_bytes());
                h.update(t);
            }
        }
    }
    h.finalize().into()
}

/// Document frequencies of every 1..4-gram, one document per reference
/// group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfTable {
    n_docs: usize,
    df: BTreeMap<Ngram, usize>,
    key: [u8; 32],
}

impl DfTable {
    pub fn build<S: AsRef<str>>(groups: &[Vec<Vec<S>>]) -> Self {
        let mut df = BTreeMap::new();
        for g in groups {
            let mut seen = BTreeSet::new();
            for r in g {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for gram in seen {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
        Self {
            n_docs: groups.len(),
            df,
            key: corpus_hash(groups),
        }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn key(&self) -> [u8; 32] {
        self.key
    }

    pub fn df(&self, gram: &[String]) -> usize {
        self.df.get(gram).copied().unwrap_or(0)
    }

    /// `ln(|I| / max(1, df))`.
    pub fn idf(&self, gram: &[String]) -> f64 {
        (self.n_docs as f64 / self.df(gram).max(1) as f64).ln()
    }

    pub fn len(&self) -> usize {
        self.df.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_docs == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&DF_CACHE_MAGIC);
        out.extend_from_slice(&DF_CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&(self.n_docs as u64).to_le_bytes());
        out.extend_from_slice(&(self.df.len() as u64).to_le_bytes());
        for (gram, &count) in &self.df {
            out.push(gram.len() as u8);
            for t in gram {
                out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                out.extend_from_slice(t.as_bytes());
            }
            out.extend_from_slice(&(count as u64).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| BaselineError::CorruptCache(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(corrupt("truncated"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != DF_CACHE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != DF_CACHE_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let key: [u8; 32] = take(32)?.try_into().expect("32 bytes");
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
        let n_docs = u64_at(take(8)?);
        let entries = u64_at(take(8)?);
        let mut df = BTreeMap::new();
        for _ in 0..entries {
            let n = take(1)?[0] as usize;
            let mut gram = Vec::with_capacity(n);
            for _ in 0..n {
                let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
                let s = std::str::from_utf8(take(len)?).map_err(|_| corrupt("token is not UTF-8"))?;
                gram.push(s.to_string());
            }
            df.insert(gram, u64_at(take(8)?));
        }
        if !take(0)?.is_empty() || !cur.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { n_docs, df, key })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| BaselineError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(io)
    }

    /// Loads a cache, rejecting one built from a different corpus.
    pub fn load(path: impl AsRef<Path>, expected_key: [u8; 32]) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| BaselineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let table = Self::from_bytes(&bytes)?;
        if table.key != expected_key {
            return Err(BaselineError::StaleCache);
        }
        Ok(table)
    }

    /// Uses the cache at `path` when it matches `groups`, otherwise builds
    /// the table and rewrites the cache. Returns whether the cache was hit.
    pub fn load_or_build<S: AsRef<str>>(path: impl AsRef<Path>, groups: &[Vec<Vec<S>>]) -> Result<(Self, bool)> {
        let path = path.as_ref();
        let key = corpus_hash(groups);
        match Self::load(path, key) {
            Ok(t) => Ok((t, true)),
            Err(_) => {
                let t = Self::build(groups);
                t.save(path)?;
                Ok((t, false))
            }
        }
    }

    /// Length-normalised tf times idf for the `n`-grams of `tokens`.
    fn weights<S: AsRef<str>>(&self, tokens: &[S], n: usize) -> BTreeMap<Ngram, f64> {
        let counts = ngram_counts(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 / total as f64 * self.idf(&g);
                (g, w)
            })
            .collect()
    }
}

fn norm(v: &BTreeMap<Ngram, f64>) -> f64 {
    v.values().map(|w| w * w).sum::<f64>().sqrt()
}

/// Raw CIDEr-D of one candidate in `[0, 1]`: mean over `n = 1..4` and over
/// references of the clipped tf-idf cosine times the length penalty.
pub fn cider_d<S: AsRef<str>, R: AsRef<[S]>>(
    candidate: &[S],
    references: &[R],
    table: &DfTable,
    cfg: &CiderConfig,
) -> Result<f64> {
    if table.is_empty() {
        return Err(BaselineError::EmptyDfTable);
    }
    if references.is_empty() {
        return Err(BaselineError::NoReferences);
    }
    let mut total = 0.0;
    for n in 1..=MAX_N {
        let cand = table.weights(candidate, n);
        let cand_norm = norm(&cand);
        let mut per_n = 0.0;
        for r in references {
            let r = r.as_ref();
            let refw = table.weights(r, n);
            let denom = cand_norm * norm(&refw);
            if denom == 0.0 {
                continue;
            }
            let dot: f64 = cand
                .iter()
                .filter_map(|(g, &wc)| refw.get(g).map(|&wr| wc.min(wr) * wr))
                .sum();
            let delta = candidate.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * cfg.sigma * cfg.sigma)).exp();
            per_n += penalty * dot / denom;
        }
        total += per_n / references.len() as f64;
    }
    Ok(total / MAX_N as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn corpus() -> Vec<Vec<Vec<String>>> {
        vec![
            vec![toks("a dog runs in the park"), toks("the dog is running on grass")],
            vec![toks("a red car on the street"), toks("a car parked near the road")],
            vec![toks("two cats sleep on a sofa"), toks("cats sleeping on the couch"), toks("a pair of cats")],
        ]
    }

    /// Independent recomputation with hash maps and explicit loops.
    fn oracle(cand: &[String], refs: &[Vec<String>], groups: &[Vec<Vec<String>>]) -> f64 {
        let grams = |s: &[String], n: usize| -> HashMap<Vec<String>, f64> {
            let mut m = HashMap::new();
            if s.len() >= n {
                for i in 0..=s.len() - n {
                    *m.entry(s[i..i + n].to_vec()).or_insert(0.0) += 1.0;
                }
            }
            m
        };
        let docs = groups.len() as f64;
        let df = |g: &Vec<String>| -> f64 {
            groups
                .iter()
                .filter(|grp| grp.iter().any(|r| r.windows(g.len()).any(|w| w == &g[..])))
                .count() as f64
        };
        let tfidf = |s: &[String], n: usize| -> HashMap<Vec<String>, f64> {
            let c = grams(s, n);
            let len: f64 = c.values().sum();
            c.into_iter()
                .map(|(g, k)| {
                    let idf = (docs / df(&g).max(1.0)).ln();
                    (g, k / len * idf)
                })
                .collect()
        };
        let mut score = 0.0;
        for n in 1..=4 {
            let vc = tfidf(cand, n);
            let mut acc = 0.0;
            for r in refs {
                let vr = tfidf(r, n);
                let nc: f64 = vc.values().map(|x| x * x).sum::<f64>().sqrt();
                let nr: f64 = vr.values().map(|x| x * x).sum::<f64>().sqrt();
                if nc * nr == 0.0 {
                    continue;
                }
                let keys: HashSet<&Vec<String>> = vc.keys().collect();
                let mut dot = 0.0;
                for k in keys {
                    if let Some(wr) = vr.get(k) {
                        dot += vc[k].min(*wr) * wr;
                    }
                }
                let d = cand.len() as f64 - r.len() as f64;
                acc += (-d * d / 72.0).exp() * dot / (nc * nr);
            }
            score += acc / refs.len() as f64;
        }
        score / 4.0
    }

    #[test]
    fn matches_from_scratch_oracle_on_three_images() {
        let groups = corpus();
        let table = DfTable::build(&groups);
        let cands = [
            toks("a dog runs on the grass"),
            toks("a car on the road"),
            toks("cats on a couch"),
            toks("the the the"),
        ];
        for cand in &cands {
            for refs in &groups {
                let got = cider_d(cand, refs, &table, &CiderConfig::default()).unwrap();
                let want = oracle(cand, refs, &groups);
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn identity_and_disjoint() {
        let groups = corpus();
        let table = DfTable::build(&groups);
        let same = vec![toks("a red car on the street"); 2];
        let s = cider_d(&same[0], &same, &table, &CiderConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let other = cider_d(&toks("a car on the street"), &same, &table, &CiderConfig::default()).unwrap();
        assert!(other < s);
        let none = cider_d(&toks("zebra giraffe"), &groups[0], &table, &CiderConfig::default()).unwrap();
        assert_eq!(none, 0.0);
        let empty = cider_d(&Vec::<String>::new(), &groups[0], &table, &CiderConfig::default()).unwrap();
        assert_eq!(empty, 0.0);
    }

    #[test]
    fn empty_table_is_an_error() {
        let table = DfTable::build::<String>(&[]);
        assert!(matches!(
            cider_d(&toks("a"), &[toks("a")], &table, &CiderConfig::default()),
            Err(BaselineError::EmptyDfTable)
        ));
    }

    #[test]
    fn document_frequency_counts_groups_once() {
        let table = DfTable::build(&corpus());
        assert_eq!(table.n_docs(), 3);
        assert_eq!(table.df(&toks("the")), 3);
        assert_eq!(table.df(&toks("cats")), 1);
        assert_eq!(table.df(&toks("on the")), 2);
        assert_eq!(table.idf(&toks("the")), 0.0);
        assert_eq!(table.idf(&toks("unseen")), 3f64.ln());
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let groups = corpus();
        let table = DfTable::build(&groups);
        let bytes = table.to_bytes();
        assert_eq!(DfTable::from_bytes(&bytes).unwrap(), table);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("df.bin");
        let (built, hit) = DfTable::load_or_build(&path, &groups).unwrap();
        assert!(!hit);
        assert_eq!(built, table);
        let (cached, hit) = DfTable::load_or_build(&path, &groups).unwrap();
        assert!(hit);
        assert_eq!(cached, table);

        let mut other = groups.clone();
        other[0].pop();
        assert!(matches!(DfTable::load(&path, corpus_hash(&other)), Err(BaselineError::StaleCache)));
        let (rebuilt, hit) = DfTable::load_or_build(&path, &other).unwrap();
        assert!(!hit);
        assert_eq!(rebuilt.key(), corpus_hash(&other));

        assert!(DfTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes;
        bad[0] = 0;
        assert!(DfTable::from_bytes(&bad).is_err());
    }

    #[test]
    fn reference_order_does_not_matter() {
        let groups = corpus();
        let table = DfTable::build(&groups);
        let mut refs = groups[2].clone();
        let cand = toks("two cats on the sofa");
        let a = cider_d(&cand, &refs, &table, &CiderConfig::default()).unwrap();
        refs.reverse();
        let b = cider_d(&cand, &refs, &table, &CiderConfig::default()).unwrap();
        assert!((a - b).abs() < 1e-15);
    }
}
