//! Batch construction for the three training configurations.
//!
//! Every function takes the caller's RNG so that a single seeded stream
//! reproduces all batches.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{CaptionGroup, TextError, TokenSeq};

/// Anchors drawn from pairwise distinct caption groups. The negatives of
/// anchor `i` are all other anchors in the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualBatch {
    pub anchors: Vec<TokenSeq>,
    /// Index into the group list for each anchor.
    pub groups: Vec<usize>,
}

impl DualBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn negatives_of(&self, i: usize) -> impl Iterator<Item = &TokenSeq> {
        self.anchors
            .iter()
            .enumerate()
            .filter(move |(j, _)| *j != i)
            .map(|(_, s)| s)
    }
}

/// Aligned (anchor, similar, negative) sentences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletBatch {
    pub anchors: Vec<TokenSeq>,
    pub similars: Vec<TokenSeq>,
    pub negatives: Vec<TokenSeq>,
    /// Where each triplet was drawn from.
    pub provenance: Vec<TripletSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSource {
    pub group: usize,
    pub anchor: usize,
    pub similar: usize,
    pub negative_group: usize,
    pub negative: usize,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn push(&mut self, groups: &[CaptionGroup], src: TripletSource) {
        self.anchors.push(groups[src.group].references[src.anchor].clone());
        self.similars.push(groups[src.group].references[src.similar].clone());
        self.negatives
            .push(groups[src.negative_group].references[src.negative].clone());
        self.provenance.push(src);
    }
}

/// Draws `n` anchors from `n` distinct groups, one uniformly chosen caption
/// each.
pub fn sample_dual_batch<R: Rng + ?Sized>(
    groups: &[CaptionGroup],
    n: usize,
    rng: &mut R,
) -> Result<DualBatch, TextError> {
    if groups.len() < 2 {
        return Err(TextError::Sampling(format!(
            "in-batch negatives need at least 2 distinct caption groups, found {}",
            groups.len()
        )));
    }
    if n < 2 || n > groups.len() {
        return Err(TextError::Sampling(format!(
            "batch of {n} anchors needs 2..={} distinct groups",
            groups.len()
        )));
    }
    let chosen = index::sample(rng, groups.len(), n).into_vec();
    let anchors = chosen
        .iter()
        .map(|&g| {
            let refs = &groups[g].references;
            refs[rng.gen_range(0..refs.len())].clone()
        })
        .collect();
    Ok(DualBatch {
        anchors,
        groups: chosen,
    })
}

fn triplet_preconditions(groups: &[CaptionGroup]) -> Result<Vec<usize>, TextError> {
    if groups.len() < 2 {
        return Err(TextError::Sampling(format!(
            "triplets need at least 2 caption groups, found {}",
            groups.len()
        )));
    }
    let eligible: Vec<usize> = (0..groups.len())
        .filter(|&g| groups[g].references.len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(TextError::Sampling(
            "every caption group has a single reference; no anchor/similar pair exists".into(),
        ));
    }
    Ok(eligible)
}

fn draw_negative<R: Rng + ?Sized>(groups: &[CaptionGroup], group: usize, rng: &mut R) -> (usize, usize) {
    let mut neg_group = rng.gen_range(0..groups.len() - 1);
    if neg_group >= group {
        neg_group += 1;
    }
    let neg = rng.gen_range(0..groups[neg_group].references.len());
    (neg_group, neg)
}

fn draw_similar<R: Rng + ?Sized>(len: usize, anchor: usize, rng: &mut R) -> usize {
    let mut s = rng.gen_range(0..len - 1);
    if s >= anchor {
        s += 1;
    }
    s
}

/// Samples `n` triplets: anchor group uniform over groups with at least two
/// references, anchor and similar two distinct captions of it, negative a
/// uniform caption of a uniformly chosen other group.
pub fn sample_triplets<R: Rng + ?Sized>(
    groups: &[CaptionGroup],
    n: usize,
    rng: &mut R,
) -> Result<TripletBatch, TextError> {
    let eligible = triplet_preconditions(groups)?;
    let mut batch = TripletBatch::default();
    for _ in 0..n {
        let group = eligible[rng.gen_range(0..eligible.len())];
        let pair = index::sample(rng, groups[group].references.len(), 2);
        let (negative_group, negative) = draw_negative(groups, group, rng);
        batch.push(
            groups,
            TripletSource {
                group,
                anchor: pair.index(0),
                similar: pair.index(1),
                negative_group,
                negative,
            },
        );
    }
    Ok(batch)
}

fn all_captions(groups: &[CaptionGroup]) -> Vec<(usize, usize)> {
    groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| (0..grp.references.len()).map(move |r| (g, r)))
        .collect()
}

/// One epoch of single-branch batches: every caption once, in a fresh
/// permutation, chunked into batches of at most `n`.
pub fn epoch_sentence_batches<R: Rng + ?Sized>(
    groups: &[CaptionGroup],
    n: usize,
    rng: &mut R,
) -> Vec<Vec<TokenSeq>> {
    let mut order = all_captions(groups);
    order.shuffle(rng);
    order
        .chunks(n.max(1))
        .map(|chunk| {
            chunk
                .iter()
                .map(|&(g, r)| groups[g].references[r].clone())
                .collect()
        })
        .collect()
}

/// One epoch of dual-branch batches covering every caption once.
///
/// Captions are permuted, then cut into consecutive batches; a batch is
/// closed early whenever the next caption's group is already present, so
/// anchors within a batch always come from distinct groups.
pub fn epoch_dual_batches<R: Rng + ?Sized>(
    groups: &[CaptionGroup],
    n: usize,
    rng: &mut R,
) -> Result<Vec<DualBatch>, TextError> {
    if groups.len() < 2 {
        return Err(TextError::Sampling(format!(
            "in-batch negatives need at least 2 distinct caption groups, found {}",
            groups.len()
        )));
    }
    let mut order = all_captions(groups);
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current = DualBatch {
        anchors: Vec::new(),
        groups: Vec::new(),
    };
    for (g, r) in order {
        if current.len() == n.max(1) || current.groups.contains(&g) {
            batches.push(std::mem::replace(
                &mut current,
                DualBatch {
                    anchors: Vec::new(),
                    groups: Vec::new(),
                },
            ));
        }
        current.anchors.push(groups[g].references[r].clone());
        current.groups.push(g);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// One epoch of triple-branch batches: every caption of a multi-reference
/// group serves once as anchor, with a random similar from its own group and
/// a random negative from another.
pub fn epoch_triplet_batches<R: Rng + ?Sized>(
    groups: &[CaptionGroup],
    n: usize,
    rng: &mut R,
) -> Result<Vec<TripletBatch>, TextError> {
    let eligible = triplet_preconditions(groups)?;
    let mut anchors: Vec<(usize, usize)> = eligible
        .iter()
        .flat_map(|&g| (0..groups[g].references.len()).map(move |r| (g, r)))
        .collect();
    anchors.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in anchors.chunks(n.max(1)) {
        let mut batch = TripletBatch::default();
        for &(group, anchor) in chunk {
            let similar = draw_similar(groups[group].references.len(), anchor, rng);
            let (negative_group, negative) = draw_negative(groups, group, rng);
            batch.push(
                groups,
                TripletSource {
                    group,
                    anchor,
                    similar,
                    negative_group,
                    negative,
                },
            );
        }
        batches.push(batch);
    }
    Ok(batches)
}
