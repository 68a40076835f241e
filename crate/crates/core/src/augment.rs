//! Paired-view augmentation with exact point correspondence.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::synth::Preset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub preset: Preset,
    /// Side of the top-down square crop (indoor), meters.
    pub crop_size: f64,
    /// Field-of-view range of the sector crop (outdoor), radians.
    pub fov_range: (f64, f64),
    /// Rotation range about z, radians.
    pub rotation_range: (f64, f64),
    pub flip: bool,
    pub scale_range: (f64, f64),
    pub min_overlap_points: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn indoor() -> Self {
        Self {
            preset: Preset::Indoor,
            crop_size: 3.5,
            fov_range: (2.0 * PI / 3.0, 2.0 * PI),
            rotation_range: (0.0, 2.0 * PI),
            flip: true,
            scale_range: (1.0, 1.0),
            min_overlap_points: 256,
            max_retries: 20,
            seed: 0,
        }
    }

    pub fn outdoor() -> Self {
        Self {
            preset: Preset::Outdoor,
            crop_size: 3.5,
            fov_range: (2.0 * PI / 3.0, 2.0 * PI),
            rotation_range: (-PI / 4.0, PI / 4.0),
            flip: true,
            scale_range: (0.95, 1.05),
            min_overlap_points: 512,
            max_retries: 20,
            seed: 0,
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Indoor => Self::indoor(),
            Preset::Outdoor => Self::outdoor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_size > 0.0) {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        let (f0, f1) = self.fov_range;
        if !(f0 > 0.0 && f0 <= f1 && f1 <= 2.0 * PI + 1e-12) {
            return Err(Error::Config("fov_range must lie within (0, 2pi]".into()));
        }
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::Config("scale_range must be positive and ordered".into()));
        }
        if self.rotation_range.0 > self.rotation_range.1 {
            return Err(Error::Config("rotation_range is reversed".into()));
        }
        if self.min_overlap_points == 0 {
            return Err(Error::Config("min_overlap_points must be at least 1".into()));
        }
        Ok(())
    }
}

/// Two augmented views of one cloud plus their matched index pairs.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view1: PointCloud,
    pub view2: PointCloud,
    /// `(i, j)` with `view1.origin_ids[i] == view2.origin_ids[j]`.
    pub matches: Vec<(usize, usize)>,
}

/// Points inside the axis-aligned top-down square around `center`.
pub fn square_crop(cloud: &PointCloud, center: [f64; 2], size: f64) -> PointCloud {
    let half = size / 2.0;
    cloud.filter(|p| (p[0] - center[0]).abs() <= half && (p[1] - center[1]).abs() <= half)
}

/// Smallest absolute angle between two azimuths.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Points whose azimuth lies within `fov / 2` of `heading`.
pub fn sector_crop(cloud: &PointCloud, heading: f64, fov: f64) -> PointCloud {
    if fov >= 2.0 * PI {
        return cloud.clone();
    }
    let half = fov / 2.0;
    cloud.filter(|p| circular_distance(p[1].atan2(p[0]), heading) <= half)
}

/// Maps coordinates by `scale * R_z(rotation) * F`, where `F` negates the
/// flipped axes. Everything except the coordinates is untouched.
pub fn rigid_transform(cloud: &PointCloud, rotation_z: f64, flip_x: bool, flip_y: bool, scale: f64) -> PointCloud {
    if rotation_z == 0.0 && !flip_x && !flip_y && scale == 1.0 {
        return cloud.clone();
    }
    let (s, c) = rotation_z.sin_cos();
    let coords = cloud
        .coords()
        .iter()
        .map(|p| {
            let x = if flip_x { -p[0] } else { p[0] };
            let y = if flip_y { -p[1] } else { p[1] };
            [scale * (c * x - s * y), scale * (s * x + c * y), scale * p[2]]
        })
        .collect();
    cloud.with_coords(coords)
}

/// Index pairs with equal origin ids, ordered by the first view's index.
pub fn match_points(view1: &PointCloud, view2: &PointCloud) -> Result<Vec<(usize, usize)>> {
    let mut index = HashMap::with_capacity(view2.len());
    for (j, &id) in view2.origin_ids().iter().enumerate() {
        if index.insert(id, j).is_some() {
            return Err(Error::InvalidInput(format!("duplicate origin id {id} in second view")));
        }
    }
    let mut seen = std::collections::HashSet::with_capacity(view1.len());
    let mut out = Vec::new();
    for (i, &id) in view1.origin_ids().iter().enumerate() {
        if !seen.insert(id) {
            return Err(Error::InvalidInput(format!("duplicate origin id {id} in first view")));
        }
        if let Some(&j) = index.get(&id) {
            out.push((i, j));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Crop {
    Square { center: [f64; 2], size: f64 },
    Sector { heading: f64, fov: f64 },
}

impl Crop {
    fn apply(&self, cloud: &PointCloud) -> PointCloud {
        match *self {
            Crop::Square { center, size } => square_crop(cloud, center, size),
            Crop::Sector { heading, fov } => sector_crop(cloud, heading, fov),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rigid {
    rotation: f64,
    flip_x: bool,
    flip_y: bool,
    scale: f64,
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sample_crop(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Crop {
    match cfg.preset {
        Preset::Indoor => {
            let (lo, hi) = cloud.bounds().expect("nonempty");
            Crop::Square {
                center: [sample_range(rng, (lo[0], hi[0])), sample_range(rng, (lo[1], hi[1]))],
                size: cfg.crop_size,
            }
        }
        Preset::Outdoor => Crop::Sector {
            heading: rng.random_range(0.0..2.0 * PI),
            fov: sample_range(rng, cfg.fov_range),
        },
    }
}

fn sample_rigid(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Rigid {
    Rigid {
        rotation: sample_range(rng, cfg.rotation_range),
        flip_x: cfg.flip && rng.random_bool(0.5),
        flip_y: cfg.flip && rng.random_bool(0.5),
        scale: sample_range(rng, cfg.scale_range),
    }
}

fn apply_rigid(cloud: &PointCloud, r: Rigid) -> PointCloud {
    rigid_transform(cloud, r.rotation, r.flip_x, r.flip_y, r.scale)
}

/// Crops and transforms two views of `cloud` that share at least
/// `min_overlap_points` source points.
///
/// Rigid parameters are drawn once; only the crops are redrawn on retry.
pub fn make_view_pair(cloud: &PointCloud, cfg: &AugmentConfig, pair_seed: u64) -> Result<ViewPair> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot augment an empty cloud".into()));
    }
    let mut rng = rng_for(cfg.seed, &[0xa06, pair_seed]);
    let rigid1 = sample_rigid(cfg, &mut rng);
    let rigid2 = sample_rigid(cfg, &mut rng);
    for _ in 0..=cfg.max_retries {
        let c1 = sample_crop(cloud, cfg, &mut rng).apply(cloud);
        let c2 = sample_crop(cloud, cfg, &mut rng).apply(cloud);
        let matches = match_points(&c1, &c2)?;
        if matches.len() >= cfg.min_overlap_points {
            return Ok(ViewPair { view1: apply_rigid(&c1, rigid1), view2: apply_rigid(&c2, rigid2), matches });
        }
    }
    Err(Error::OverlapUnsatisfiable { required: cfg.min_overlap_points, attempts: cfg.max_retries + 1 })
}

/// A single cropped and transformed view, as used for labeled scenes.
///
/// Falls back to the uncropped cloud if no crop keeps `min_overlap_points` points.
pub fn make_single_view(cloud: &PointCloud, cfg: &AugmentConfig, view_seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot augment an empty cloud".into()));
    }
    let mut rng = rng_for(cfg.seed, &[0x5e1, view_seed]);
    let rigid = sample_rigid(cfg, &mut rng);
    let want = cfg.min_overlap_points.min(cloud.len());
    for _ in 0..=cfg.max_retries {
        let c = sample_crop(cloud, cfg, &mut rng).apply(cloud);
        if c.len() >= want {
            return Ok(apply_rigid(&c, rigid));
        }
    }
    Ok(apply_rigid(cloud, rigid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, Array2::zeros((n, 1)), Some(vec![0; n])).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)])
            .collect();
        let feats = Array2::from_shape_fn((n, 2), |(i, k)| (i * 2 + k) as f64);
        PointCloud::new(pts, feats, Some((0..n as i32).map(|i| i % 4).collect())).unwrap()
    }

    #[test]
    fn square_crop_ignores_height_and_respects_boundary() {
        let c = cloud(vec![[0.0, 0.0, 5.0], [1.76, 0.0, 0.0], [1.75, -1.75, 0.0]]);
        let out = square_crop(&c, [0.0, 0.0], 3.5);
        assert_eq!(out.origin_ids(), &[0, 2]);
    }

    #[test]
    fn square_crop_matches_naive_filter() {
        let c = random_cloud(500, 1);
        let out = square_crop(&c, [0.7, -1.2], 3.5);
        let naive: Vec<u32> = c
            .coords()
            .iter()
            .zip(c.origin_ids())
            .filter(|(p, _)| (p[0] - 0.7).abs() <= 1.75 && (p[1] + 1.2).abs() <= 1.75)
            .map(|(_, &id)| id)
            .collect();
        assert_eq!(out.origin_ids(), naive.as_slice());
        // idempotent
        assert_eq!(square_crop(&out, [0.7, -1.2], 3.5), out);
    }

    #[test]
    fn sector_crop_cases() {
        let c = random_cloud(300, 2);
        assert_eq!(sector_crop(&c, 1.0, 2.0 * PI), c);

        // half-width pi/4: azimuth pi/5 is inside, pi/3 outside
        let inside = PI / 5.0;
        let outside = PI / 3.0;
        let p = cloud(vec![[inside.cos(), inside.sin(), 0.0], [outside.cos(), outside.sin(), 0.0]]);
        assert_eq!(sector_crop(&p, 0.0, PI / 2.0).origin_ids(), &[0]);

        let b = -PI + 0.1;
        let p = cloud(vec![[b.cos(), b.sin(), 0.0]]);
        assert_eq!(sector_crop(&p, PI, PI / 2.0).len(), 1);
    }

    #[test]
    fn sector_crop_matches_circular_oracle() {
        let c = random_cloud(500, 3);
        for (heading, fov) in [(PI, PI / 2.0), (0.1, 1.0), (5.9, 2.5)] {
            let out = sector_crop(&c, heading, fov);
            let naive: Vec<u32> = c
                .coords()
                .iter()
                .zip(c.origin_ids())
                .filter(|(p, _)| {
                    // angle difference via the dot product of unit directions
                    let az = p[1].atan2(p[0]);
                    let cosd = az.cos() * heading.cos() + az.sin() * heading.sin();
                    cosd.clamp(-1.0, 1.0).acos() <= fov / 2.0
                })
                .map(|(_, &id)| id)
                .collect();
            assert_eq!(out.origin_ids(), naive.as_slice());
            assert_eq!(sector_crop(&out, heading, fov), out);
        }
    }

    #[test]
    fn rigid_transform_cases() {
        let c = random_cloud(50, 4);
        assert_eq!(rigid_transform(&c, 0.0, false, false, 1.0), c);
        let p = rigid_transform(&cloud(vec![[1.0, 0.0, 0.0]]), PI, false, false, 1.0);
        let q = p.coords()[0];
        assert!((q[0] + 1.0).abs() < 1e-12 && q[1].abs() < 1e-12 && q[2] == 0.0);
    }

    #[test]
    fn rigid_transform_scales_distances() {
        let c = random_cloud(60, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let scale = rng.random_range(0.5..2.0);
            let t = rigid_transform(&c, rng.random_range(0.0..7.0), rng.random(), rng.random(), scale);
            assert_eq!(t.feats(), c.feats());
            assert_eq!(t.labels(), c.labels());
            assert_eq!(t.origin_ids(), c.origin_ids());
            let d = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
            for i in 0..c.len() {
                for j in i + 1..c.len() {
                    let ratio = d(&t.coords()[i], &t.coords()[j]) / d(&c.coords()[i], &c.coords()[j]);
                    assert!((ratio - scale).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn match_points_cases() {
        let f = Array2::zeros((3, 1));
        let v1 = PointCloud::with_origin_ids(vec![[0.0; 3]; 3], f.clone(), None, vec![1, 2, 3]).unwrap();
        let v2 = PointCloud::with_origin_ids(vec![[0.0; 3]; 3], f.clone(), None, vec![2, 3, 4]).unwrap();
        assert_eq!(match_points(&v1, &v2).unwrap(), vec![(1, 0), (2, 1)]);
        let v3 = PointCloud::with_origin_ids(vec![[0.0; 3]; 3], f, None, vec![7, 8, 9]).unwrap();
        assert!(match_points(&v1, &v3).unwrap().is_empty());
        assert_eq!(match_points(&v1, &v1).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn full_circle_identity_pair_matches_everything() {
        let c = random_cloud(100, 7);
        let cfg = AugmentConfig {
            preset: Preset::Outdoor,
            fov_range: (2.0 * PI, 2.0 * PI),
            rotation_range: (0.0, 0.0),
            flip: false,
            scale_range: (1.0, 1.0),
            min_overlap_points: 1,
            ..AugmentConfig::outdoor()
        };
        let pair = make_view_pair(&c, &cfg, 0).unwrap();
        assert_eq!(pair.matches, (0..100).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(pair.view1, c);
    }

    #[test]
    fn unsatisfiable_overlap() {
        let c = random_cloud(100, 8);
        let cfg = AugmentConfig { min_overlap_points: 101, max_retries: 0, ..AugmentConfig::indoor() };
        assert!(matches!(
            make_view_pair(&c, &cfg, 0),
            Err(Error::OverlapUnsatisfiable { attempts: 1, .. })
        ));
    }
}
