//! Supervised and unsupervised objectives with exact gradients.
//!
//! Every loss returns its value together with gradients for the inputs it is
//! differentiable in. Inputs treated as constants (detached keys, memory bank
//! entries, fixed pseudo labels) never receive a gradient entry.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cloud::IGNORE;
use crate::error::{Error, Result};

/// Differentiable inputs a loss can report gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossInput {
    Scores,
    Embeddings1,
    Embeddings2,
}

#[derive(Debug, Clone, Default)]
pub struct LossValue {
    pub value: f64,
    pub grads: BTreeMap<LossInput, Array2<f64>>,
    pub stats: GuidanceStats,
}

impl LossValue {
    pub fn grad(&self, input: LossInput) -> Option<&Array2<f64>> {
        self.grads.get(&input)
    }
}

/// Bookkeeping of the confidence gates and label mask.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GuidanceStats {
    /// Pair sides whose confidence gate was open.
    pub gates_open: usize,
    pub gates_total: usize,
    /// Negatives removed by the pseudo-label mask.
    pub negatives_masked: usize,
    pub negatives_total: usize,
}

impl GuidanceStats {
    pub fn gate_rate(&self) -> f64 {
        ratio(self.gates_open, self.gates_total)
    }

    pub fn mask_rate(&self) -> f64 {
        ratio(self.negatives_masked, self.negatives_total)
    }

    pub fn merge(&mut self, o: &GuidanceStats) {
        self.gates_open += o.gates_open;
        self.gates_total += o.gates_total;
        self.negatives_masked += o.negatives_masked;
        self.negatives_total += o.negatives_total;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidedLossConfig {
    /// Temperature.
    pub tau: f64,
    /// Confidence threshold.
    pub gamma: f64,
    /// Drop negatives sharing the anchor's pseudo label.
    pub label_guidance: bool,
    /// Gate each side on the key's confidence.
    pub confidence_guidance: bool,
    /// Average over pairs with an open gate instead of over all pairs.
    pub renormalize_gated: bool,
}

impl Default for GuidedLossConfig {
    fn default() -> Self {
        Self { tau: 0.1, gamma: 0.75, label_guidance: true, confidence_guidance: true, renormalize_gated: false }
    }
}

impl GuidedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        // gamma above 1 closes every gate
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be a nonnegative threshold".into()));
        }
        Ok(())
    }
}

/// Argmax labels and max-softmax confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Pseudo labels from scores; ties go to the lowest class index.
pub fn pseudo_labels(scores: ArrayView2<f64>) -> PseudoLabels {
    let mut labels = Vec::with_capacity(scores.nrows());
    let mut confidences = Vec::with_capacity(scores.nrows());
    for row in scores.rows() {
        let (best, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        labels.push(best);
        confidences.push(1.0 / denom);
    }
    PseudoLabels { labels, confidences }
}

/// Pseudo-label guidance mask.
pub fn guidance_mask(label1: usize, label2: usize, is_matched: bool) -> bool {
    is_matched || label1 != label2
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross entropy over non-ignored points, gradient w.r.t. the scores.
pub fn cross_entropy(scores: ArrayView2<f64>, labels: &[i32]) -> Result<LossValue> {
    let (n, k) = scores.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} score rows but {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y < IGNORE || y >= k as i32) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {k} classes")));
    }
    let count = labels.iter().filter(|&&y| y != IGNORE).count();
    if count == 0 {
        return Err(Error::InvalidInput("every point is ignored".into()));
    }
    let inv = 1.0 / count as f64;
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for ((row, &y), mut g) in scores.rows().into_iter().zip(labels).zip(grad.rows_mut()) {
        if y == IGNORE {
            continue;
        }
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[y as usize];
        for (gj, &s) in g.iter_mut().zip(row.iter()) {
            *gj = (s - lse).exp() * inv;
        }
        g[y as usize] -= inv;
    }
    let mut grads = BTreeMap::new();
    grads.insert(LossInput::Scores, grad);
    Ok(LossValue { value: total * inv, grads, stats: GuidanceStats::default() })
}

/// Cross entropy against labels fixed ahead of time by a frozen model.
pub fn self_training_loss(scores: ArrayView2<f64>, fixed_labels: &[i32]) -> Result<LossValue> {
    cross_entropy(scores, fixed_labels)
}

fn check_pairs(pairs: &[(usize, usize)], n1: usize, n2: usize) -> Result<()> {
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n1 || j >= n2) {
        return Err(Error::InvalidInput(format!("pair ({i}, {j}) out of range")));
    }
    Ok(())
}

fn check_embeddings(e1: &ArrayView2<f64>, e2: &ArrayView2<f64>) -> Result<()> {
    if e1.ncols() != e2.ncols() {
        return Err(Error::Shape(format!("embedding widths {} and {} differ", e1.ncols(), e2.ncols())));
    }
    Ok(())
}

/// Mean squared distance between matched embeddings.
pub fn mse_consistency(pairs: &[(usize, usize)], e1: ArrayView2<f64>, e2: ArrayView2<f64>) -> Result<LossValue> {
    check_embeddings(&e1, &e2)?;
    check_pairs(pairs, e1.nrows(), e2.nrows())?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no matched pairs".into()));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut g1 = Array2::zeros(e1.dim());
    let mut g2 = Array2::zeros(e2.dim());
    let mut total = 0.0;
    for &(i, j) in pairs {
        let diff = &e1.row(i) - &e2.row(j);
        total += diff.dot(&diff);
        g1.row_mut(i).scaled_add(2.0 * inv, &diff);
        g2.row_mut(j).scaled_add(-2.0 * inv, &diff);
    }
    let grads = BTreeMap::from([(LossInput::Embeddings1, g1), (LossInput::Embeddings2, g2)]);
    Ok(LossValue { value: total * inv, grads, stats: GuidanceStats::default() })
}

/// Mean of `1 - cos` between matched embeddings.
pub fn cosine_consistency(pairs: &[(usize, usize)], e1: ArrayView2<f64>, e2: ArrayView2<f64>) -> Result<LossValue> {
    check_embeddings(&e1, &e2)?;
    check_pairs(pairs, e1.nrows(), e2.nrows())?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no matched pairs".into()));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut g1 = Array2::zeros(e1.dim());
    let mut g2 = Array2::zeros(e2.dim());
    let mut total = 0.0;
    for &(i, j) in pairs {
        let (a, b) = (e1.row(i), e2.row(j));
        let (na, nb) = (a.dot(&a).sqrt().max(1e-12), b.dot(&b).sqrt().max(1e-12));
        let cos = a.dot(&b) / (na * nb);
        total += 1.0 - cos;
        // d cos / da = b / (|a||b|) - cos a / |a|^2
        let mut ga = g1.row_mut(i);
        ga.scaled_add(-inv / (na * nb), &b);
        ga.scaled_add(inv * cos / (na * na), &a);
        let mut gb = g2.row_mut(j);
        gb.scaled_add(-inv / (na * nb), &a);
        gb.scaled_add(inv * cos / (nb * nb), &b);
    }
    let grads = BTreeMap::from([(LossInput::Embeddings1, g1), (LossInput::Embeddings2, g2)]);
    Ok(LossValue { value: total * inv, grads, stats: GuidanceStats::default() })
}

/// InfoNCE over matched points: keys are the second elements of `pairs`,
/// gradients reach both views.
pub fn point_infonce(pairs: &[(usize, usize)], e1: ArrayView2<f64>, e2: ArrayView2<f64>, tau: f64) -> Result<LossValue> {
    check_embeddings(&e1, &e2)?;
    check_pairs(pairs, e1.nrows(), e2.nrows())?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no positive pairs".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let first: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let second: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let anchors = e1.select(Axis(0), &first);
    let keys = e2.select(Axis(0), &second);
    let mut logits = anchors.dot(&keys.t());
    logits /= tau;

    let m = pairs.len();
    let inv = 1.0 / m as f64;
    let mut total = 0.0;
    // logits become (softmax - I) / (tau m)
    for (p, mut row) in logits.rows_mut().into_iter().enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[p];
        row.mapv_inplace(|v| (v - lse).exp());
        row[p] -= 1.0;
        row *= inv / tau;
    }
    let d_anchor = logits.dot(&keys);
    let d_key = logits.t().dot(&anchors);
    let mut g1 = Array2::zeros(e1.dim());
    let mut g2 = Array2::zeros(e2.dim());
    for (p, (&i, &j)) in first.iter().zip(&second).enumerate() {
        g1.row_mut(i).scaled_add(1.0, &d_anchor.row(p));
        g2.row_mut(j).scaled_add(1.0, &d_key.row(p));
    }
    let grads = BTreeMap::from([(LossInput::Embeddings1, g1), (LossInput::Embeddings2, g2)]);
    Ok(LossValue { value: total * inv, grads, stats: GuidanceStats::default() })
}

/// Negative keys for the guided loss.
#[derive(Debug, Clone, Copy)]
pub enum Negatives<'a> {
    /// Index sets into the second view (`neg2`, keys for view-1 anchors) and
    /// the first view (`neg1`, keys for view-2 anchors).
    InCloud { neg1: &'a [usize], neg2: &'a [usize] },
    /// Detached memory-bank embeddings with their class tags, shared by both sides.
    Bank { embeddings: ArrayView2<'a, f64>, classes: &'a [usize] },
}

/// One direction of the guided loss: anchors from one view pulled towards
/// their matched (detached) key in the other view.
struct Side<'a> {
    anchors: ArrayView2<'a, f64>,
    anchor_labels: &'a [usize],
    /// Embeddings of the other view, treated as constants.
    keys: ArrayView2<'a, f64>,
    /// Confidences of the other view, gating this side.
    key_confidences: &'a [f64],
    neg_keys: Array2<f64>,
    neg_labels: Vec<usize>,
    /// Key-view index of every in-cloud negative.
    neg_index: Option<Vec<usize>>,
}

struct SideResult {
    per_pair: Vec<f64>,
    open: Vec<bool>,
    grad: Array2<f64>,
    masked: usize,
    compared: usize,
}

impl Side<'_> {
    /// `pairs` are `(anchor index, key index)`.
    fn evaluate(&self, pairs: &[(usize, usize)], cfg: &GuidedLossConfig, weight: impl Fn(usize) -> f64) -> SideResult {
        let m = pairs.len();
        let open: Vec<bool> =
            pairs.iter().map(|&(_, k)| !cfg.confidence_guidance || self.key_confidences[k] >= cfg.gamma).collect();
        let active: Vec<usize> = (0..m).filter(|&p| open[p]).collect();
        let mut per_pair = vec![0.0; m];
        let mut grad = Array2::zeros(self.anchors.dim());
        let (mut masked, mut compared) = (0, 0);
        if active.is_empty() {
            return SideResult { per_pair, open, grad, masked, compared };
        }
        let anchor_rows: Vec<usize> = active.iter().map(|&p| pairs[p].0).collect();
        let anchors = self.anchors.select(Axis(0), &anchor_rows);
        let neg_logits = anchors.dot(&self.neg_keys.t()) / cfg.tau;
        let mut weights = vec![0.0; self.neg_keys.nrows()];
        for (a, &p) in active.iter().enumerate() {
            let (i, j) = pairs[p];
            let anchor = self.anchors.row(i);
            let pos_key = self.keys.row(j);
            let pos = anchor.dot(&pos_key) / cfg.tau;
            let label = self.anchor_labels[i];
            let row = neg_logits.row(a);
            // keep[k]: negative k enters the denominator
            let mut max = pos;
            for (k, w) in weights.iter_mut().enumerate() {
                let duplicate = self.neg_index.as_ref().is_some_and(|idx| idx[k] == j);
                let keep = !duplicate && (!cfg.label_guidance || guidance_mask(label, self.neg_labels[k], false));
                if !duplicate {
                    compared += 1;
                    if !keep {
                        masked += 1;
                    }
                }
                *w = if keep { row[k] } else { f64::NEG_INFINITY };
                max = max.max(*w);
            }
            let mut denom = (pos - max).exp();
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                denom += *w;
            }
            per_pair[p] = max + denom.ln() - pos;
            // d/d anchor = (sum_k softmax_k key_k - pos_key) / tau
            let scale = weight(p) / cfg.tau;
            let mut g = grad.row_mut(i);
            g.scaled_add(scale * ((pos - max).exp() / denom - 1.0), &pos_key);
            for (k, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    g.scaled_add(scale * w / denom, &self.neg_keys.row(k));
                }
            }
        }
        SideResult { per_pair, open, grad, masked, compared }
    }
}

fn gather(e: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    e.select(Axis(0), idx)
}

fn dedup_indices(idx: &[usize], n: usize) -> Result<Vec<usize>> {
    if let Some(bad) = idx.iter().find(|&&k| k >= n) {
        return Err(Error::InvalidInput(format!("negative index {bad} out of range")));
    }
    let mut v = idx.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

/// Guided point contrastive loss averaged over the positive pairs.
///
/// Each pair contributes a view-1-anchored term gated by the view-2 key's
/// confidence and a view-2-anchored term gated by the view-1 key's
/// confidence. The key side is detached in each term, so view-1 gradients
/// come only from view-1-anchored terms and vice versa.
#[allow(clippy::too_many_arguments)]
pub fn guided_contrastive(
    pairs: &[(usize, usize)],
    e1: ArrayView2<f64>,
    e2: ArrayView2<f64>,
    pl1: &PseudoLabels,
    pl2: &PseudoLabels,
    negatives: Negatives<'_>,
    cfg: &GuidedLossConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    check_embeddings(&e1, &e2)?;
    check_pairs(pairs, e1.nrows(), e2.nrows())?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no positive pairs".into()));
    }
    if pl1.len() != e1.nrows() || pl2.len() != e2.nrows() {
        return Err(Error::Shape("pseudo labels do not match embeddings".into()));
    }
    let ((neg2_keys, neg2_labels, neg2_index), (neg1_keys, neg1_labels, neg1_index)) = match negatives {
        Negatives::InCloud { neg1, neg2 } => {
            let n2 = dedup_indices(neg2, e2.nrows())?;
            let n1 = dedup_indices(neg1, e1.nrows())?;
            (
                (gather(&e2, &n2), n2.iter().map(|&k| pl2.labels[k]).collect(), Some(n2)),
                (gather(&e1, &n1), n1.iter().map(|&k| pl1.labels[k]).collect(), Some(n1)),
            )
        }
        Negatives::Bank { embeddings, classes } => {
            if embeddings.nrows() != classes.len() {
                return Err(Error::Shape("bank embeddings and tags differ in length".into()));
            }
            if embeddings.ncols() != e1.ncols() {
                return Err(Error::Shape("bank embedding width differs".into()));
            }
            let keys = embeddings.to_owned();
            ((keys.clone(), classes.to_vec(), None), (keys, classes.to_vec(), None))
        }
    };

    let side1 = Side {
        anchors: e1,
        anchor_labels: &pl1.labels,
        keys: e2,
        key_confidences: &pl2.confidences,
        neg_keys: neg2_keys,
        neg_labels: neg2_labels,
        neg_index: neg2_index,
    };
    let side2 = Side {
        anchors: e2,
        anchor_labels: &pl2.labels,
        keys: e1,
        key_confidences: &pl1.confidences,
        neg_keys: neg1_keys,
        neg_labels: neg1_labels,
        neg_index: neg1_index,
    };
    let reversed: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (j, i)).collect();

    let gate = |side: &Side, pairs: &[(usize, usize)]| -> Vec<bool> {
        pairs.iter().map(|&(_, k)| !cfg.confidence_guidance || side.key_confidences[k] >= cfg.gamma).collect()
    };
    let open1 = gate(&side1, pairs);
    let open2 = gate(&side2, &reversed);
    let counted = if cfg.renormalize_gated {
        (0..pairs.len()).filter(|&p| open1[p] || open2[p]).count()
    } else {
        pairs.len()
    };
    let inv = if counted == 0 { 0.0 } else { 1.0 / counted as f64 };

    let r1 = side1.evaluate(pairs, cfg, |_| inv);
    let r2 = side2.evaluate(&reversed, cfg, |_| inv);
    // fixed-order reduction over pairs
    let value = (0..pairs.len()).map(|p| r1.per_pair[p] + r2.per_pair[p]).sum::<f64>() * inv;
    let stats = GuidanceStats {
        gates_open: r1.open.iter().chain(&r2.open).filter(|&&o| o).count(),
        gates_total: 2 * pairs.len(),
        negatives_masked: r1.masked + r2.masked,
        negatives_total: r1.compared + r2.compared,
    };
    let grads = BTreeMap::from([(LossInput::Embeddings1, r1.grad), (LossInput::Embeddings2, r2.grad)]);
    Ok(LossValue { value, grads, stats })
}

/// Guided loss of a single positive pair `(i, j)`.
#[allow(clippy::too_many_arguments)]
pub fn guided_pair_loss(
    i: usize,
    j: usize,
    e1: ArrayView2<f64>,
    e2: ArrayView2<f64>,
    pl1: &PseudoLabels,
    pl2: &PseudoLabels,
    neg2: &[usize],
    neg1: &[usize],
    cfg: &GuidedLossConfig,
) -> Result<LossValue> {
    guided_contrastive(&[(i, j)], e1, e2, pl1, pl2, Negatives::InCloud { neg1, neg2 }, cfg)
}
