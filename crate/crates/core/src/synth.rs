//! Deterministic synthetic indoor and outdoor scenes.
//!
//! Indoor scenes are rectangular rooms (floor = class 0, walls = class 1) with
//! axis-aligned boxes whose size archetype depends on their class. Outdoor
//! scenes are LiDAR-like sweeps around a sensor at the origin (ground = class
//! 0) with radially thinning point density.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Raw feature channels produced for every point (a color-like triple).
pub const FEAT_DIM: usize = 3;

const ROOM_HEIGHT: f64 = 2.6;
const SENSOR_HEIGHT: f64 = 1.7;
const GROUND_MIN_RANGE: f64 = 2.0;
const PLACEMENT_RETRIES: usize = 100;
const LAYOUT_RETRIES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Indoor,
    Outdoor,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor" => Ok(Preset::Indoor),
            "outdoor" => Ok(Preset::Outdoor),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub preset: Preset,
    /// Room side length range (indoor) or maximum sensor range (outdoor, upper bound used), meters.
    pub extent: (f64, f64),
    pub object_count: (usize, usize),
    pub points_per_scene: (usize, usize),
    pub class_count: usize,
    pub noise_sigma: f64,
    /// Expected point share of the rarest class (`class_count - 1`); 0 disables the rare class.
    pub rare_class_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn indoor() -> Self {
        Self {
            preset: Preset::Indoor,
            extent: (5.0, 8.0),
            object_count: (4, 8),
            points_per_scene: (3000, 4000),
            class_count: 8,
            noise_sigma: 0.01,
            rare_class_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn outdoor() -> Self {
        Self {
            preset: Preset::Outdoor,
            extent: (30.0, 30.0),
            object_count: (6, 12),
            points_per_scene: (1500, 2000),
            class_count: 6,
            noise_sigma: 0.02,
            rare_class_fraction: 0.0,
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
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if !(0.0..=1.0 / self.class_count as f64).contains(&self.rare_class_fraction) {
            return Err(Error::Config(format!(
                "rare_class_fraction must lie in [0, 1/{}]",
                self.class_count
            )));
        }
        if !(self.extent.0 > 0.0 && self.extent.0 <= self.extent.1) {
            return Err(Error::Config("extent must be a positive, ordered range".into()));
        }
        if self.object_count.0 > self.object_count.1 {
            return Err(Error::Config("object_count range is reversed".into()));
        }
        if self.points_per_scene.0 == 0 || self.points_per_scene.0 > self.points_per_scene.1 {
            return Err(Error::Config("points_per_scene must be a positive, ordered range".into()));
        }
        Ok(())
    }

    fn rare_class(&self) -> Option<usize> {
        (self.rare_class_fraction > 0.0 && self.class_count >= 3).then_some(self.class_count - 1)
    }
}

/// Flat parallelogram `origin + s*u + t*v`, `s, t` in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
struct Face {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
}

impl Face {
    fn area(&self) -> f64 {
        let [a, b, c] = self.u;
        let [d, e, f] = self.v;
        let cx = b * f - c * e;
        let cy = c * d - a * f;
        let cz = a * e - b * d;
        (cx * cx + cy * cy + cz * cz).sqrt()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let s: f64 = rng.random();
        let t: f64 = rng.random();
        std::array::from_fn(|k| self.origin[k] + s * self.u[k] + t * self.v[k])
    }
}

#[derive(Debug, Clone, Copy)]
struct Footprint {
    min: [f64; 2],
    max: [f64; 2],
}

impl Footprint {
    fn overlaps(&self, o: &Footprint, gap: f64) -> bool {
        self.min[0] < o.max[0] + gap
            && o.min[0] < self.max[0] + gap
            && self.min[1] < o.max[1] + gap
            && o.min[1] < self.max[1] + gap
    }

    fn contains(&self, p: &[f64; 3]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Faces(Vec<Face>),
    /// Disc of ground around the sensor with range density proportional to 1/r.
    Ground { r_min: f64, r_max: f64, z: f64 },
}

#[derive(Debug, Clone)]
struct Primitive {
    class: usize,
    shape: Shape,
    color: [f64; 3],
    weight: f64,
}

impl Primitive {
    fn area(&self) -> f64 {
        match &self.shape {
            Shape::Faces(f) => f.iter().map(Face::area).sum(),
            Shape::Ground { r_min, r_max, .. } => PI * (r_max * r_max - r_min * r_min),
        }
    }
}

/// Box without its bottom face.
fn box_faces(min: [f64; 3], size: [f64; 3]) -> Vec<Face> {
    let [x, y, z] = min;
    let [w, d, h] = size;
    vec![
        Face { origin: [x, y, z + h], u: [w, 0.0, 0.0], v: [0.0, d, 0.0] },
        Face { origin: [x, y, z], u: [w, 0.0, 0.0], v: [0.0, 0.0, h] },
        Face { origin: [x, y + d, z], u: [w, 0.0, 0.0], v: [0.0, 0.0, h] },
        Face { origin: [x, y, z], u: [0.0, d, 0.0], v: [0.0, 0.0, h] },
        Face { origin: [x + w, y, z], u: [0.0, d, 0.0], v: [0.0, 0.0, h] },
    ]
}

/// Base color of a class, spread around the hue circle.
fn class_color(class: usize) -> [f64; 3] {
    let h = (class as f64 * 0.381_966) % 1.0 * 2.0 * PI;
    [
        0.5 + 0.3 * h.cos(),
        0.5 + 0.3 * (h + 2.0 * PI / 3.0).cos(),
        0.5 + 0.3 * (h + 4.0 * PI / 3.0).cos(),
    ]
}

/// Size ranges `(height, width, depth)` of indoor object class `class >= 2`.
fn indoor_archetype(class: usize) -> [(f64, f64); 3] {
    match class - 2 {
        0 => [(0.40, 0.55), (0.40, 0.60), (0.40, 0.60)],
        1 => [(0.70, 0.80), (0.80, 1.60), (0.60, 1.00)],
        2 => [(1.60, 2.00), (0.50, 1.00), (0.40, 0.60)],
        3 => [(0.45, 0.60), (1.40, 2.00), (1.80, 2.20)],
        4 => [(0.80, 0.95), (1.60, 2.20), (0.80, 1.00)],
        5 => [(1.00, 1.30), (0.30, 0.50), (0.30, 0.50)],
        k => {
            let h = 0.3 + 0.2 * (k % 9) as f64;
            let w = 0.3 + 0.25 * (k % 5) as f64;
            [(h, h + 0.1), (w, w + 0.2), (w, w + 0.2)]
        }
    }
}

/// Size ranges `(height, width, depth)` of outdoor object class `class >= 1`.
fn outdoor_archetype(class: usize) -> [(f64, f64); 3] {
    match class {
        1 => [(4.0, 8.0), (8.0, 16.0), (0.5, 1.0)],
        2 => [(1.4, 1.7), (3.8, 4.6), (1.7, 2.0)],
        3 => [(3.0, 5.0), (0.15, 0.25), (0.15, 0.25)],
        4 => [(1.6, 1.9), (0.4, 0.6), (0.4, 0.6)],
        k => {
            let h = 0.5 + 0.4 * (k % 6) as f64;
            let w = 0.3 + 0.5 * (k % 4) as f64;
            [(h, h + 0.3), (w, w + 0.3), (w, w + 0.3)]
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn pick_range(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Object classes for one scene: the rare class at most once, others cycled at random.
fn object_classes(cfg: &SynthConfig, first_object_class: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = pick_range(rng, cfg.object_count);
    let rare = cfg.rare_class();
    let common: Vec<usize> = (first_object_class..cfg.class_count).filter(|&c| Some(c) != rare).collect();
    let mut classes = Vec::with_capacity(count + 1);
    if let Some(r) = rare {
        if r >= first_object_class {
            classes.push(r);
        }
    }
    if !common.is_empty() {
        while classes.len() < count.max(classes.len()) {
            classes.push(common[rng.random_range(0..common.len())]);
        }
    }
    classes
}

fn object_color(rng: &mut ChaCha8Rng, class: usize) -> [f64; 3] {
    let base = class_color(class);
    let jitter = Normal::new(0.0, 0.05).unwrap();
    std::array::from_fn(|k| base[k] + jitter.sample(rng))
}

/// Assigns sampling weights: area-proportional, except the rare class which
/// receives exactly `rare_class_fraction` of the total.
fn assign_weights(prims: &mut [Primitive], rare: Option<usize>, rare_fraction: f64) {
    let is_rare = |p: &Primitive| Some(p.class) == rare;
    let common: f64 = prims.iter().filter(|p| !is_rare(p)).map(|p| p.weight).sum();
    let rare_total: f64 = prims.iter().filter(|p| is_rare(p)).map(|p| p.weight).sum();
    for p in prims.iter_mut() {
        if is_rare(p) {
            p.weight = rare_fraction * p.weight / rare_total;
        } else if rare_total > 0.0 {
            p.weight = (1.0 - rare_fraction) * p.weight / common;
        }
    }
}

/// Non-overlapping footprints and heights for `classes`, or `None` if some
/// box found no free spot within `PLACEMENT_RETRIES` tries.
fn place_boxes(classes: &[usize], lx: f64, ly: f64, h: f64, rng: &mut ChaCha8Rng) -> Option<Vec<(usize, Footprint, f64)>> {
    let mut boxes: Vec<(usize, Footprint, f64)> = Vec::new();
    for &class in classes {
        let arch = indoor_archetype(class);
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let bh = uniform(rng, arch[0]).min(h - 0.05);
            let (mut bw, mut bd) = (uniform(rng, arch[1]), uniform(rng, arch[2]));
            if rng.random_bool(0.5) {
                std::mem::swap(&mut bw, &mut bd);
            }
            if bw + 0.2 >= lx || bd + 0.2 >= ly {
                continue;
            }
            let x = rng.random_range(0.1..lx - bw - 0.1);
            let y = rng.random_range(0.1..ly - bd - 0.1);
            let fp = Footprint { min: [x, y], max: [x + bw, y + bd] };
            if boxes.iter().any(|o| o.1.overlaps(&fp, 0.1)) {
                continue;
            }
            boxes.push((class, fp, bh));
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(boxes)
}

/// Generates one indoor room.
pub fn gen_indoor_scene(cfg: &SynthConfig, scene_seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    if cfg.preset != Preset::Indoor {
        return Err(Error::Config("gen_indoor_scene needs the indoor preset".into()));
    }
    let mut rng = rng_for(cfg.seed, &[0x1d00, scene_seed]);
    let h = ROOM_HEIGHT;
    let classes = object_classes(cfg, 2, &mut rng);
    // each attempt draws a fresh room size and layout
    let mut layout = None;
    for _ in 0..LAYOUT_RETRIES {
        let lx = uniform(&mut rng, cfg.extent);
        let ly = uniform(&mut rng, cfg.extent);
        if let Some(boxes) = place_boxes(&classes, lx, ly, h, &mut rng) {
            layout = Some((lx, ly, boxes));
            break;
        }
    }
    let Some((lx, ly, boxes)) = layout else {
        return Err(Error::Placement(format!(
            "could not place {} boxes in a room of extent {:?} after {LAYOUT_RETRIES} layouts",
            classes.len(),
            cfg.extent
        )));
    };

    let floor_face = Face { origin: [0.0, 0.0, 0.0], u: [lx, 0.0, 0.0], v: [0.0, ly, 0.0] };
    let walls = vec![
        Face { origin: [0.0, 0.0, 0.0], u: [lx, 0.0, 0.0], v: [0.0, 0.0, h] },
        Face { origin: [0.0, ly, 0.0], u: [lx, 0.0, 0.0], v: [0.0, 0.0, h] },
        Face { origin: [0.0, 0.0, 0.0], u: [0.0, ly, 0.0], v: [0.0, 0.0, h] },
        Face { origin: [lx, 0.0, 0.0], u: [0.0, ly, 0.0], v: [0.0, 0.0, h] },
    ];
    let mut prims = vec![
        Primitive { class: 0, shape: Shape::Faces(vec![floor_face]), color: object_color(&mut rng, 0), weight: 0.0 },
        Primitive { class: 1, shape: Shape::Faces(walls), color: object_color(&mut rng, 1), weight: 0.0 },
    ];
    let footprints: Vec<Footprint> = boxes.iter().map(|b| b.1).collect();
    for (class, fp, bh) in boxes {
        let size = [fp.max[0] - fp.min[0], fp.max[1] - fp.min[1], bh];
        prims.push(Primitive {
            class,
            shape: Shape::Faces(box_faces([fp.min[0], fp.min[1], 0.0], size)),
            color: object_color(&mut rng, class),
            weight: 0.0,
        });
    }
    for p in prims.iter_mut() {
        p.weight = p.area();
    }
    assign_weights(&mut prims, cfg.rare_class(), cfg.rare_class_fraction);

    sample_points(cfg, &prims, &mut rng, |p, prim| {
        // floor under furniture is not visible
        prim.class != 0 || !footprints.iter().any(|f| f.contains(p))
    })
}

/// Generates one outdoor sweep around a sensor at the origin.
pub fn gen_outdoor_scene(cfg: &SynthConfig, scene_seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    if cfg.preset != Preset::Outdoor {
        return Err(Error::Config("gen_outdoor_scene needs the outdoor preset".into()));
    }
    let mut rng = rng_for(cfg.seed, &[0x0d00, scene_seed]);
    let max_range = cfg.extent.1;
    let z = -SENSOR_HEIGHT;
    let ground_max = (max_range * max_range - z * z).sqrt();
    if ground_max <= GROUND_MIN_RANGE {
        return Err(Error::Config("outdoor extent too small for the sensor height".into()));
    }
    let mut prims = vec![Primitive {
        class: 0,
        shape: Shape::Ground { r_min: GROUND_MIN_RANGE, r_max: ground_max, z },
        color: object_color(&mut rng, 0),
        weight: 0.0,
    }];
    let mut footprints: Vec<Footprint> = Vec::new();
    let mut ranges = vec![0.0];
    for class in object_classes(cfg, 1, &mut rng) {
        let arch = outdoor_archetype(class);
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let (bh, bw, bd) =
                (uniform(&mut rng, arch[0]), uniform(&mut rng, arch[1]), uniform(&mut rng, arch[2]));
            let r = rng.random_range(4.0..0.8 * ground_max);
            let theta = rng.random_range(0.0..2.0 * PI);
            let (cx, cy) = (r * theta.cos(), r * theta.sin());
            let (bw, bd) = if rng.random_bool(0.5) { (bw, bd) } else { (bd, bw) };
            let fp = Footprint { min: [cx - bw / 2.0, cy - bd / 2.0], max: [cx + bw / 2.0, cy + bd / 2.0] };
            let far = [fp.min, fp.max, [fp.min[0], fp.max[1]], [fp.max[0], fp.min[1]]]
                .iter()
                .map(|c| (c[0] * c[0] + c[1] * c[1] + (z + bh).powi(2)).sqrt())
                .fold(0.0, f64::max);
            let near_origin = fp.min[0] < 1.0 && fp.max[0] > -1.0 && fp.min[1] < 1.0 && fp.max[1] > -1.0;
            if far > max_range || near_origin || footprints.iter().any(|o| o.overlaps(&fp, 0.3)) {
                continue;
            }
            footprints.push(fp);
            ranges.push(r);
            prims.push(Primitive {
                class,
                shape: Shape::Faces(box_faces([fp.min[0], fp.min[1], z], [bw, bd, bh])),
                color: object_color(&mut rng, class),
                weight: 0.0,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement(format!("could not place a class-{class} object")));
        }
    }
    // Beam density falls off with range.
    for (p, r) in prims.iter_mut().zip(&ranges) {
        p.weight = match p.shape {
            Shape::Ground { .. } => 0.6 * p.area() / ground_max,
            Shape::Faces(_) => p.area() / r.max(1.0),
        };
    }
    assign_weights(&mut prims, cfg.rare_class(), cfg.rare_class_fraction);

    sample_points(cfg, &prims, &mut rng, |p, prim| {
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        range <= max_range && (prim.class != 0 || !footprints.iter().any(|f| f.contains(p)))
    })
}

/// Generates a scene for whichever preset `cfg` names.
pub fn gen_scene(cfg: &SynthConfig, scene_seed: u64) -> Result<PointCloud> {
    match cfg.preset {
        Preset::Indoor => gen_indoor_scene(cfg, scene_seed),
        Preset::Outdoor => gen_outdoor_scene(cfg, scene_seed),
    }
}

fn sample_points(
    cfg: &SynthConfig,
    prims: &[Primitive],
    rng: &mut ChaCha8Rng,
    accept: impl Fn(&[f64; 3], &Primitive) -> bool,
) -> Result<PointCloud> {
    let n = pick_range(rng, cfg.points_per_scene);
    let choose = WeightedIndex::new(prims.iter().map(|p| p.weight))
        .map_err(|e| Error::Placement(format!("degenerate primitive weights: {e}")))?;
    let face_choice: Vec<Option<WeightedIndex<f64>>> = prims
        .iter()
        .map(|p| match &p.shape {
            Shape::Faces(f) => Some(WeightedIndex::new(f.iter().map(Face::area)).unwrap()),
            Shape::Ground { .. } => None,
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).unwrap();
    let color_noise = Normal::new(0.0, 0.03).unwrap();
    let lighting = rng.random_range(0.8..1.2);

    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * FEAT_DIM);
    let mut labels = Vec::with_capacity(n);
    let mut rejected = 0usize;
    while coords.len() < n {
        let k = choose.sample(rng);
        let prim = &prims[k];
        let clean = match (&prim.shape, &face_choice[k]) {
            (Shape::Faces(faces), Some(fc)) => faces[fc.sample(rng)].sample(rng),
            (Shape::Ground { r_min, r_max, z }, _) => {
                let r = r_min * (r_max / r_min).powf(rng.random::<f64>());
                let t = rng.random_range(0.0..2.0 * PI);
                [r * t.cos(), r * t.sin(), *z]
            }
            _ => unreachable!(),
        };
        let p = if cfg.noise_sigma > 0.0 {
            std::array::from_fn(|d| clean[d] + noise.sample(rng))
        } else {
            clean
        };
        if !accept(&clean, prim) || !accept(&p, prim) {
            rejected += 1;
            if rejected > 100 * n + 10_000 {
                return Err(Error::Placement("point sampling keeps getting rejected".into()));
            }
            continue;
        }
        coords.push(p);
        labels.push(prim.class as i32);
        for c in prim.color {
            feats.push(lighting * c + color_noise.sample(rng));
        }
    }
    let feats = Array2::from_shape_vec((n, FEAT_DIM), feats).expect("sized above");
    PointCloud::new(coords, feats, Some(labels))
}
