//! Category-balanced sampling of positive pairs and memory-bank negatives.

use std::collections::VecDeque;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PseudoLabels;
use crate::model::{read_f64, read_u32};

/// How positive pairs are drawn from the matched set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Random,
    Cbs,
}

/// Per-class quotas for a fixed budget.
///
/// Each class first gets `min(budget / classes, supply)`. The shortfall is
/// then handed out one item at a time, in rounds over the classes that still
/// have supply, visiting them in a random order each round.
pub fn balanced_quota<R: Rng + ?Sized>(supply: &[usize], budget: usize, rng: &mut R) -> Vec<usize> {
    if supply.is_empty() {
        return Vec::new();
    }
    let base = budget / supply.len();
    let mut take: Vec<usize> = supply.iter().map(|&s| s.min(base)).collect();
    let total: usize = supply.iter().sum();
    let mut remaining = budget.min(total) - take.iter().sum::<usize>();
    while remaining > 0 {
        let mut open: Vec<usize> = (0..supply.len()).filter(|&c| take[c] < supply[c]).collect();
        open.shuffle(rng);
        for c in open {
            if remaining == 0 {
                break;
            }
            take[c] += 1;
            remaining -= 1;
        }
    }
    take
}

/// Matched pairs grouped by the pseudo class of their first point.
#[derive(Debug, Clone)]
pub struct PairPool {
    pairs: Vec<(usize, usize)>,
    by_class: Vec<Vec<usize>>,
}

impl PairPool {
    pub fn new(pairs: Vec<(usize, usize)>, first_labels: &[usize], class_count: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); class_count];
        for (p, &(i, _)) in pairs.iter().enumerate() {
            let c = *first_labels
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("pair index {i} has no pseudo label")))?;
            by_class
                .get_mut(c)
                .ok_or_else(|| Error::InvalidInput(format!("class {c} out of range")))?
                .push(p);
        }
        Ok(Self { pairs, by_class })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Matched-pair count per class.
    pub fn counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    pub fn class_members(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }
}

/// Category-balanced positive pairs: an even per-class quota, topped up from
/// classes with remaining pairs until `min(k_pos, |M|)` pairs are drawn.
pub fn cbs_positive_pairs<R: Rng + ?Sized>(pool: &PairPool, k_pos: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty pair pool".into()));
    }
    if k_pos == 0 {
        return Err(Error::Config("k_pos must be at least 1".into()));
    }
    if k_pos >= pool.len() {
        return Ok(pool.pairs.clone());
    }
    let quota = balanced_quota(&pool.counts(), k_pos, rng);
    let mut out = Vec::with_capacity(k_pos);
    for (members, &q) in pool.by_class.iter().zip(&quota) {
        for k in index::sample(rng, members.len(), q) {
            out.push(pool.pairs[members[k]]);
        }
    }
    Ok(out)
}

/// Uniform positive pairs without replacement.
pub fn random_positive_pairs<R: Rng + ?Sized>(
    pairs: &[(usize, usize)],
    k_pos: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no matched pairs".into()));
    }
    if k_pos >= pairs.len() {
        return Ok(pairs.to_vec());
    }
    Ok(index::sample(rng, pairs.len(), k_pos).into_iter().map(|k| pairs[k]).collect())
}

/// Uniform index subset of `0..n` of size `min(k, n)`, ascending.
pub fn random_indices<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut v = index::sample(rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

/// Negatives drawn from the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeDraw {
    pub embeddings: Array2<f64>,
    pub classes: Vec<usize>,
}

impl NegativeDraw {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Per-class FIFO queues of detached embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    queues: Vec<VecDeque<Vec<f64>>>,
    capacity: usize,
    update_quota: usize,
    embed_dim: usize,
}

impl MemoryBank {
    pub fn new(class_count: usize, capacity: usize, update_quota: usize, embed_dim: usize) -> Self {
        Self { queues: vec![VecDeque::new(); class_count], capacity, update_quota, embed_dim }
    }

    pub fn class_count(&self) -> usize {
        self.queues.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn update_quota(&self) -> usize {
        self.update_quota
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn population(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn queue_lengths(&self) -> Vec<usize> {
        self.queues.iter().map(VecDeque::len).collect()
    }

    /// Entries of class `c`, oldest first.
    pub fn queue(&self, c: usize) -> impl Iterator<Item = &[f64]> {
        self.queues[c].iter().map(Vec::as_slice)
    }

    /// Appends one embedding to class `c`, evicting the oldest beyond capacity.
    pub fn push(&mut self, c: usize, embedding: &[f64]) {
        debug_assert_eq!(embedding.len(), self.embed_dim);
        let q = &mut self.queues[c];
        q.push_back(embedding.to_vec());
        while q.len() > self.capacity {
            q.pop_front();
        }
    }

    /// Pushes up to `update_quota` embeddings per class, drawn uniformly from
    /// the eligible points of `sources` and pushed in source order. With `min_confidence`, only points at
    /// or above it are eligible. Classes with no eligible point are skipped.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        sources: &[(ArrayView2<f64>, &PseudoLabels)],
        min_confidence: Option<f64>,
        rng: &mut R,
    ) -> Result<()> {
        let mut eligible: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.class_count()];
        for (s, (emb, pl)) in sources.iter().enumerate() {
            if emb.nrows() != pl.len() || emb.ncols() != self.embed_dim {
                return Err(Error::Shape("bank update source has inconsistent shape".into()));
            }
            for (i, (&c, &conf)) in pl.labels.iter().zip(&pl.confidences).enumerate() {
                if c >= self.class_count() {
                    return Err(Error::InvalidInput(format!("class {c} out of range")));
                }
                if min_confidence.is_none_or(|g| conf >= g) {
                    eligible[c].push((s, i));
                }
            }
        }
        for (c, cand) in eligible.iter().enumerate() {
            let mut picked = index::sample(rng, cand.len(), self.update_quota.min(cand.len())).into_vec();
            picked.sort_unstable();
            for k in picked {
                let (s, i) = cand[k];
                let row = sources[s].0.row(i);
                let v: Vec<f64> = row.iter().copied().collect();
                self.push(c, &v);
            }
        }
        Ok(())
    }

    /// Class-balanced negatives: `k_neg / classes` per class, with the
    /// shortfall of short queues redistributed over the others.
    pub fn sample_negatives<R: Rng + ?Sized>(&self, k_neg: usize, rng: &mut R) -> Result<NegativeDraw> {
        if self.population() == 0 {
            return Err(Error::EmptyBank);
        }
        let quota = balanced_quota(&self.queue_lengths(), k_neg, rng);
        let total: usize = quota.iter().sum();
        let mut embeddings = Array2::zeros((total, self.embed_dim));
        let mut classes = Vec::with_capacity(total);
        for (c, &q) in quota.iter().enumerate() {
            for k in index::sample(rng, self.queues[c].len(), q) {
                let r = classes.len();
                embeddings.row_mut(r).iter_mut().zip(&self.queues[c][k]).for_each(|(d, s)| *d = *s);
                classes.push(c);
            }
        }
        Ok(NegativeDraw { embeddings, classes })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for v in [self.class_count(), self.capacity, self.update_quota, self.embed_dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for q in &self.queues {
            w.write_all(&(q.len() as u32).to_le_bytes())?;
            for e in q {
                for v in e {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let classes = read_u32(r)? as usize;
        let capacity = read_u32(r)? as usize;
        let update_quota = read_u32(r)? as usize;
        let embed_dim = read_u32(r)? as usize;
        let mut bank = Self::new(classes, capacity, update_quota, embed_dim);
        for q in bank.queues.iter_mut() {
            let len = read_u32(r)? as usize;
            if len > capacity {
                return Err(Error::Format("bank queue longer than its capacity".into()));
            }
            for _ in 0..len {
                q.push_back((0..embed_dim).map(|_| read_f64(r)).collect::<Result<_>>()?);
            }
        }
        Ok(bank)
    }
}
