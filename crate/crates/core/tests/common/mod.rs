//! Independent oracles and random instance generators shared by the
//! integration tests.
#![allow(dead_code)]

use gpcl_core::losses::{GuidedLossConfig, PseudoLabels};
use gpcl_core::seed::rng_for;
use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng_for(seed, &[0x7e57])
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Rows scaled to unit length.
pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = random_matrix(rng, rows, cols, 1.0);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

/// One-to-one index pairs between two sets of sizes `n1` and `n2`.
pub fn random_pairs(rng: &mut ChaCha8Rng, n1: usize, n2: usize, m: usize) -> Vec<(usize, usize)> {
    let a = index::sample(rng, n1, m).into_vec();
    let b = index::sample(rng, n2, m).into_vec();
    a.into_iter().zip(b).collect()
}

pub fn random_subset(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    let k = rng.random_range(0..=max.min(n));
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

pub fn random_pseudo(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> PseudoLabels {
    PseudoLabels {
        labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
        confidences: (0..n).map(|_| rng.random_range(0.3..1.0)).collect(),
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + h;
        let fp = f(&xp);
        xp[[r, c]] = orig - h;
        let fm = f(&xp);
        xp[[r, c]] = orig;
        g[[r, c]] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error with a floor on the denominator for entries near zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn max_rel_err(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    a.iter().zip(n).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|k| m[[i, k]]).collect()
}

/// Negative keys as the oracle sees them.
pub enum OracleNegatives<'a> {
    InCloud { neg1: &'a [usize], neg2: &'a [usize] },
    Bank { embeddings: &'a Array2<f64>, classes: &'a [usize] },
}

/// Contribution of one anchor: `-ln(e^{pos} / (e^{pos} + sum_k e^{neg_k}))`
/// and its gradient in the anchor, written with plain exponentials.
fn anchor_term(anchor: &[f64], pos_key: &[f64], negs: &[Vec<f64>], tau: f64) -> (f64, Vec<f64>) {
    let d = anchor.len();
    let pos = (dot(anchor, pos_key) / tau).exp();
    let mut den = pos;
    let mut weights = Vec::with_capacity(negs.len());
    for n in negs {
        let w = (dot(anchor, n) / tau).exp();
        weights.push(w);
        den += w;
    }
    let value = -(pos / den).ln();
    let mut grad = vec![0.0; d];
    for k in 0..d {
        let mut s = pos / den * pos_key[k] - pos_key[k];
        for (n, w) in negs.iter().zip(&weights) {
            s += w / den * n[k];
        }
        grad[k] = s / tau;
    }
    (value, grad)
}

/// Guided contrastive loss computed pair by pair, side by side, negative by negative.
pub fn guided_oracle(
    pairs: &[(usize, usize)],
    e1: &Array2<f64>,
    e2: &Array2<f64>,
    pl1: &PseudoLabels,
    pl2: &PseudoLabels,
    negatives: &OracleNegatives,
    cfg: &GuidedLossConfig,
) -> (f64, Array2<f64>, Array2<f64>) {
    let mut g1 = Array2::zeros(e1.dim());
    let mut g2 = Array2::zeros(e2.dim());
    let open1 = |j: usize| !cfg.confidence_guidance || pl2.confidences[j] >= cfg.gamma;
    let open2 = |i: usize| !cfg.confidence_guidance || pl1.confidences[i] >= cfg.gamma;
    let counted = if cfg.renormalize_gated {
        pairs.iter().filter(|&&(i, j)| open1(j) || open2(i)).count()
    } else {
        pairs.len()
    };
    if counted == 0 {
        return (0.0, g1, g2);
    }
    let w = 1.0 / counted as f64;
    let mut total = 0.0;
    for &(i, j) in pairs {
        // view-1 anchor against view-2 keys
        if open1(j) {
            let mut negs = Vec::new();
            match negatives {
                OracleNegatives::InCloud { neg2, .. } => {
                    for &k in neg2.iter() {
                        if k != j && (!cfg.label_guidance || pl1.labels[i] != pl2.labels[k]) {
                            negs.push(row(e2, k));
                        }
                    }
                }
                OracleNegatives::Bank { embeddings, classes } => {
                    for k in 0..classes.len() {
                        if !cfg.label_guidance || pl1.labels[i] != classes[k] {
                            negs.push(row(embeddings, k));
                        }
                    }
                }
            }
            let (v, g) = anchor_term(&row(e1, i), &row(e2, j), &negs, cfg.tau);
            total += v;
            for k in 0..g.len() {
                g1[[i, k]] += w * g[k];
            }
        }
        // view-2 anchor against view-1 keys
        if open2(i) {
            let mut negs = Vec::new();
            match negatives {
                OracleNegatives::InCloud { neg1, .. } => {
                    for &k in neg1.iter() {
                        if k != i && (!cfg.label_guidance || pl2.labels[j] != pl1.labels[k]) {
                            negs.push(row(e1, k));
                        }
                    }
                }
                OracleNegatives::Bank { embeddings, classes } => {
                    for k in 0..classes.len() {
                        if !cfg.label_guidance || pl2.labels[j] != classes[k] {
                            negs.push(row(embeddings, k));
                        }
                    }
                }
            }
            let (v, g) = anchor_term(&row(e2, j), &row(e1, i), &negs, cfg.tau);
            total += v;
            for k in 0..g.len() {
                g2[[j, k]] += w * g[k];
            }
        }
    }
    (total * w, g1, g2)
}

/// InfoNCE over pairs with gradients to both views, by explicit loops.
pub fn infonce_oracle(pairs: &[(usize, usize)], e1: &Array2<f64>, e2: &Array2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let m = pairs.len();
    let d = e1.ncols();
    let mut g1 = Array2::zeros(e1.dim());
    let mut g2 = Array2::zeros(e2.dim());
    let mut total = 0.0;
    for p in 0..m {
        let i = pairs[p].0;
        let mut exps = vec![0.0; m];
        let mut den = 0.0;
        for q in 0..m {
            exps[q] = (dot(&row(e1, i), &row(e2, pairs[q].1)) / tau).exp();
            den += exps[q];
        }
        total += -(exps[p] / den).ln();
        for q in 0..m {
            let j = pairs[q].1;
            let coef = (exps[q] / den - if q == p { 1.0 } else { 0.0 }) / (tau * m as f64);
            for k in 0..d {
                g1[[i, k]] += coef * e2[[j, k]];
                g2[[j, k]] += coef * e1[[i, k]];
            }
        }
    }
    (total / m as f64, g1, g2)
}

/// Mean squared distance by explicit loops.
pub fn mse_oracle(pairs: &[(usize, usize)], e1: &Array2<f64>, e2: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let m = pairs.len() as f64;
    let mut g1 = Array2::zeros(e1.dim());
    let mut g2 = Array2::zeros(e2.dim());
    let mut total = 0.0;
    for &(i, j) in pairs {
        for k in 0..e1.ncols() {
            let diff = e1[[i, k]] - e2[[j, k]];
            total += diff * diff;
            g1[[i, k]] += 2.0 * diff / m;
            g2[[j, k]] -= 2.0 * diff / m;
        }
    }
    (total / m, g1, g2)
}

/// Random guided-loss instance with `n <= 64` points and up to five classes.
pub struct GuidedInstance {
    pub pairs: Vec<(usize, usize)>,
    pub e1: Array2<f64>,
    pub e2: Array2<f64>,
    pub pl1: PseudoLabels,
    pub pl2: PseudoLabels,
    pub neg1: Vec<usize>,
    pub neg2: Vec<usize>,
    pub bank: Array2<f64>,
    pub bank_classes: Vec<usize>,
    pub cfg: GuidedLossConfig,
}

pub fn guided_instance(seed: u64) -> GuidedInstance {
    let mut r = rng(seed);
    let n1 = r.random_range(2..=64);
    let n2 = r.random_range(2..=64);
    let d = r.random_range(2..=8);
    let classes = r.random_range(2..=5);
    let m = r.random_range(1..=n1.min(n2));
    let bank_len = r.random_range(0..=20);
    GuidedInstance {
        pairs: random_pairs(&mut r, n1, n2, m),
        e1: unit_rows(&mut r, n1, d),
        e2: unit_rows(&mut r, n2, d),
        pl1: random_pseudo(&mut r, n1, classes),
        pl2: random_pseudo(&mut r, n2, classes),
        neg1: random_subset(&mut r, n1, 24),
        neg2: random_subset(&mut r, n2, 24),
        bank: unit_rows(&mut r, bank_len, d),
        bank_classes: (0..bank_len).map(|_| r.random_range(0..classes)).collect(),
        cfg: GuidedLossConfig {
            tau: r.random_range(0.05..1.0),
            gamma: r.random_range(0.0..1.0),
            label_guidance: r.random_bool(0.8),
            confidence_guidance: r.random_bool(0.8),
            renormalize_gated: r.random_bool(0.3),
        },
    }
}
