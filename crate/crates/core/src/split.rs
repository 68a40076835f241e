//! Labeled / unlabeled partitioning of a scene set.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::SceneSet;
use crate::error::{Error, Result};

/// Labeled ratios used in the standard semi-supervised protocol.
pub const STANDARD_RATIOS: [f64; 6] = [0.05, 0.1, 0.2, 0.3, 0.4, 1.0];

#[derive(Debug, Clone)]
pub struct SplitSpec {
    /// Fraction of scenes that keep their labels, in `(0, 1]`.
    pub labeled_ratio: f64,
    /// Keep whole groups on one side, cutting at most one group.
    pub sequence_aware: bool,
    /// Extra scenes appended to the unlabeled side (transductive mode).
    pub transductive_extra: Option<SceneSet>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(labeled_ratio: f64, sequence_aware: bool, seed: u64) -> Self {
        Self { labeled_ratio, sequence_aware, transductive_extra: None, seed }
    }
}

/// Scene indices on each side of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Group split across both sides, if any.
    pub cut_group: Option<u32>,
}

/// Number of labeled scenes requested for `total` scenes at `ratio`.
pub fn labeled_target(total: usize, ratio: f64) -> usize {
    ((ratio * total as f64).round() as usize).clamp(1, total)
}

/// Plans a split over scenes with the given group ids.
pub fn plan_split(group_ids: &[u32], ratio: f64, sequence_aware: bool, seed: u64) -> Result<SplitPlan> {
    if group_ids.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty scene set".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidInput(format!("labeled ratio must lie in (0, 1], got {ratio}")));
    }
    let n = group_ids.len();
    let target = labeled_target(n, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if !sequence_aware {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut labeled = order[..target].to_vec();
        let mut unlabeled = order[target..].to_vec();
        labeled.sort_unstable();
        unlabeled.sort_unstable();
        return Ok(SplitPlan { labeled, unlabeled, cut_group: None });
    }

    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &g) in group_ids.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    // The seed only decides which subset wins when several reach the same count.
    let mut order: Vec<u32> = groups.keys().copied().collect();
    order.shuffle(&mut rng);
    let sizes: Vec<usize> = order.iter().map(|g| groups[g].len()).collect();

    let (whole, cut) = if let Some(subset) = subset_with_sum(&sizes, None, target) {
        (subset, None)
    } else {
        // Group ids ascending, so ties resolve to the lowest id.
        groups
            .iter()
            .find_map(|(&gid, members)| {
                let pos = order.iter().position(|&g| g == gid).unwrap();
                let size = members.len();
                // Largest whole-group sum that leaves a proper cut of this group.
                (target.saturating_sub(size - 1)..target)
                    .rev()
                    .find_map(|s| subset_with_sum(&sizes, Some(pos), s))
                    .map(|subset| {
                        let s: usize = subset.iter().map(|&k| sizes[k]).sum();
                        (subset, Some((gid, target - s)))
                    })
            })
            .expect("a single cut always reaches the target")
    };

    let mut labeled: Vec<usize> = whole.iter().flat_map(|&k| groups[&order[k]].iter().copied()).collect();
    if let Some((gid, front)) = cut {
        labeled.extend_from_slice(&groups[&gid][..front]);
    }
    labeled.sort_unstable();
    let mut is_labeled = vec![false; n];
    for &i in &labeled {
        is_labeled[i] = true;
    }
    let unlabeled = (0..n).filter(|&i| !is_labeled[i]).collect();
    Ok(SplitPlan { labeled, unlabeled, cut_group: cut.map(|(g, _)| g) })
}

/// Finds positions in `sizes` (skipping `exclude`) whose sizes sum to `target`.
fn subset_with_sum(sizes: &[usize], exclude: Option<usize>, target: usize) -> Option<Vec<usize>> {
    // reach[k][s]: sum s is reachable using the first k positions.
    let m = sizes.len();
    let mut reach = vec![vec![false; target + 1]; m + 1];
    reach[0][0] = true;
    for k in 0..m {
        for s in 0..=target {
            let mut r = reach[k][s];
            if !r && Some(k) != exclude && s >= sizes[k] {
                r = reach[k][s - sizes[k]];
            }
            reach[k + 1][s] = r;
        }
    }
    if !reach[m][target] {
        return None;
    }
    let mut picked = Vec::new();
    let mut s = target;
    for k in (0..m).rev() {
        if reach[k][s] {
            continue;
        }
        picked.push(k);
        s -= sizes[k];
    }
    debug_assert_eq!(s, 0);
    picked.reverse();
    Some(picked)
}

/// Splits a scene set into labeled and unlabeled sets.
///
/// Unlabeled scenes have their labels dropped. Any transductive extra scenes
/// are appended to the unlabeled side.
pub fn split_dataset(set: &SceneSet, spec: &SplitSpec) -> Result<(SceneSet, SceneSet)> {
    let plan = plan_split(&set.group_ids, spec.labeled_ratio, spec.sequence_aware, spec.seed)?;
    let mut labeled = SceneSet::empty(set.class_count);
    for &i in &plan.labeled {
        labeled.push(set.scenes[i].clone(), set.group_ids[i]);
    }
    let mut unlabeled = SceneSet::empty(set.class_count);
    for &i in &plan.unlabeled {
        unlabeled.push(set.scenes[i].without_labels(), set.group_ids[i]);
    }
    if let Some(extra) = &spec.transductive_extra {
        if extra.class_count != set.class_count {
            return Err(Error::InvalidInput("transductive scenes use a different class count".into()));
        }
        for (s, &g) in extra.scenes.iter().zip(&extra.group_ids) {
            unlabeled.push(s.without_labels(), g);
        }
    }
    Ok((labeled, unlabeled))
}
