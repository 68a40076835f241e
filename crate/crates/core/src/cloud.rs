//! Point-cloud data model and voxel hashing.

use std::collections::{HashMap, HashSet};

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE: i32 = -1;

/// A point cloud with per-point raw features, optional labels, and origin ids.
///
/// `origin_ids` index into the source cloud the points were drawn from and are
/// carried unchanged through every augmentation, which is what makes exact
/// cross-view correspondence possible.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    feats: Array2<f64>,
    labels: Option<Vec<i32>>,
    origin_ids: Vec<u32>,
}

impl PointCloud {
    /// Builds a cloud whose origin ids are `0..N`.
    pub fn new(coords: Vec<[f64; 3]>, feats: Array2<f64>, labels: Option<Vec<i32>>) -> Result<Self> {
        let origin_ids = (0..coords.len() as u32).collect();
        Self::with_origin_ids(coords, feats, labels, origin_ids)
    }

    pub fn with_origin_ids(
        coords: Vec<[f64; 3]>,
        feats: Array2<f64>,
        labels: Option<Vec<i32>>,
        origin_ids: Vec<u32>,
    ) -> Result<Self> {
        let n = coords.len();
        if feats.nrows() != n {
            return Err(Error::Shape(format!("{} coords but {} feature rows", n, feats.nrows())));
        }
        if origin_ids.len() != n {
            return Err(Error::Shape(format!("{} coords but {} origin ids", n, origin_ids.len())));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape(format!("{} coords but {} labels", n, l.len())));
            }
            if let Some(bad) = l.iter().find(|&&y| y < IGNORE) {
                return Err(Error::InvalidInput(format!("label {bad} below IGNORE")));
            }
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        if feats.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        let mut seen = HashSet::with_capacity(n);
        if !origin_ids.iter().all(|id| seen.insert(*id)) {
            return Err(Error::InvalidInput("duplicate origin id".into()));
        }
        Ok(Self { coords, feats, labels, origin_ids })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.feats.ncols()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn feats(&self) -> &Array2<f64> {
        &self.feats
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn origin_ids(&self) -> &[u32] {
        &self.origin_ids
    }

    /// Checks every label lies in `[IGNORE, class_count)`.
    pub fn check_labels(&self, class_count: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some(bad) = l.iter().find(|&&y| y >= class_count as i32) {
                return Err(Error::InvalidInput(format!(
                    "label {bad} out of range for {class_count} classes"
                )));
            }
        }
        Ok(())
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            feats: self.feats.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            origin_ids: indices.iter().map(|&i| self.origin_ids[i]).collect(),
        }
    }

    /// Keeps the points for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(&[f64; 3]) -> bool) -> PointCloud {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.coords[i])).collect();
        self.select(&idx)
    }

    /// Replaces coordinates, keeping everything else.
    pub(crate) fn with_coords(&self, coords: Vec<[f64; 3]>) -> PointCloud {
        debug_assert_eq!(coords.len(), self.len());
        PointCloud { coords, ..self.clone() }
    }

    /// Drops the labels, as done for scenes on the unlabeled side.
    pub fn without_labels(&self) -> PointCloud {
        PointCloud { labels: None, ..self.clone() }
    }

    /// Axis-aligned bounds `(min, max)` of the coordinates.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.coords.first()?;
        Some(self.coords.iter().fold((first, first), |(mut lo, mut hi), p| {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
            (lo, hi)
        }))
    }
}

/// A collection of scenes sharing feature width and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSet {
    pub scenes: Vec<PointCloud>,
    /// Sequence or area id per scene.
    pub group_ids: Vec<u32>,
    pub class_count: usize,
}

impl SceneSet {
    pub fn new(scenes: Vec<PointCloud>, group_ids: Vec<u32>, class_count: usize) -> Result<Self> {
        if scenes.len() != group_ids.len() {
            return Err(Error::Shape(format!(
                "{} scenes but {} group ids",
                scenes.len(),
                group_ids.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::InvalidInput("class_count must be at least 2".into()));
        }
        if let Some(first) = scenes.first() {
            if scenes.iter().any(|s| s.feat_dim() != first.feat_dim()) {
                return Err(Error::Shape("scenes disagree on feature width".into()));
            }
        }
        for s in &scenes {
            s.check_labels(class_count)?;
        }
        Ok(Self { scenes, group_ids, class_count })
    }

    pub fn empty(class_count: usize) -> Self {
        Self { scenes: Vec::new(), group_ids: Vec::new(), class_count }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn push(&mut self, scene: PointCloud, group_id: u32) {
        self.scenes.push(scene);
        self.group_ids.push(group_id);
    }
}

/// Integer cell key of a voxel.
pub type CellKey = [i64; 3];

/// Assignment of points to cubic cells of a regular grid.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    voxel_size: f64,
    keys: Vec<CellKey>,
    members: Vec<Vec<usize>>,
    cell_of: Vec<usize>,
}

impl VoxelGrid {
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn cell_count(&self) -> usize {
        self.keys.len()
    }

    /// Cell keys, in order of first occurrence.
    pub fn keys(&self) -> &[CellKey] {
        &self.keys
    }

    /// Point indices in cell `c`, ascending.
    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    /// Cell index of every point.
    pub fn cell_of(&self) -> &[usize] {
        &self.cell_of
    }

    pub fn key_of_point(&self, i: usize) -> CellKey {
        self.keys[self.cell_of[i]]
    }
}

/// Cell key of a single coordinate: componentwise `floor(coord / voxel_size)`.
pub fn cell_key(p: &[f64; 3], voxel_size: f64) -> CellKey {
    [
        (p[0] / voxel_size).floor() as i64,
        (p[1] / voxel_size).floor() as i64,
        (p[2] / voxel_size).floor() as i64,
    ]
}

/// Hashes each point into its grid cell.
pub fn voxelize(coords: &[[f64; 3]], voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidInput(format!("voxel size must be positive, got {voxel_size}")));
    }
    if coords.is_empty() {
        return Err(Error::InvalidInput("cannot voxelize an empty cloud".into()));
    }
    let mut index: HashMap<CellKey, usize> = HashMap::new();
    let mut keys = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut cell_of = Vec::with_capacity(coords.len());
    for (i, p) in coords.iter().enumerate() {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite coordinate at point {i}")));
        }
        let key = cell_key(p, voxel_size);
        let c = *index.entry(key).or_insert_with(|| {
            keys.push(key);
            members.push(Vec::new());
            keys.len() - 1
        });
        members[c].push(i);
        cell_of.push(c);
    }
    Ok(VoxelGrid { voxel_size, keys, members, cell_of })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn neighbouring_points_land_in_adjacent_cells() {
        let g = voxelize(&[[0.01, 0.01, 0.01], [0.03, 0.01, 0.01]], 0.02).unwrap();
        assert_eq!(g.key_of_point(0), [0, 0, 0]);
        assert_eq!(g.key_of_point(1), [1, 0, 0]);
    }

    #[test]
    fn negative_coordinates_floor_down() {
        let g = voxelize(&[[-0.01, 0.0, 0.0]], 0.02).unwrap();
        assert_eq!(g.key_of_point(0), [-1, 0, 0]);
    }

    #[test]
    fn coarse_grid_collects_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> =
            (0..1000).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let g = voxelize(&pts, 10.0).unwrap();
        assert_eq!(g.cell_count(), 1);
        assert_eq!(g.members(0), (0..1000).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(voxelize(&[[f64::NAN, 0.0, 0.0]], 0.1).is_err());
        assert!(voxelize(&[[0.0; 3]], 0.0).is_err());
        assert!(voxelize(&[], 0.1).is_err());
    }

    #[test]
    fn cloud_invariants_are_checked() {
        let f = Array2::zeros((2, 1));
        assert!(PointCloud::with_origin_ids(vec![[0.0; 3]; 2], f.clone(), None, vec![4, 4]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]; 2], f.clone(), Some(vec![0, -2])).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::INFINITY, 0.0]; 2], f.clone(), None).is_err());
        let c = PointCloud::new(vec![[0.0; 3]; 2], f, Some(vec![0, 3])).unwrap();
        assert!(c.check_labels(3).is_err());
        assert!(c.check_labels(4).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn voxelize_is_total(
            pts in proptest::collection::vec(proptest::array::uniform3(-50.0f64..50.0), 1..200),
            size in 0.01f64..5.0,
        ) {
            let g = voxelize(&pts, size).unwrap();
            let total: usize = (0..g.cell_count()).map(|c| g.members(c).len()).sum();
            proptest::prop_assert_eq!(total, pts.len());
            for (i, p) in pts.iter().enumerate() {
                proptest::prop_assert_eq!(g.key_of_point(i), cell_key(p, size));
                proptest::prop_assert!(g.members(g.cell_of()[i]).contains(&i));
            }
        }
    }
}
