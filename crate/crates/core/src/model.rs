//! Pointwise segmentation network with a voxel-mean context stage.
//!
//! ```text
//! x = [coords, feats]                        (N x D0)
//! h1 = relu(x W1 + b1)                       (N x H)
//! p  = mean of h1 over the point's pool cell (N x H)
//! F  = relu([h1, p] W2 + b2)                 (N x C_F)   backbone
//! S  = F Wc + bc                             (N x |C|)   classifier
//! E  = normalize(relu(F Wp1 + bp1) Wp2 + bp2) (N x C_E)  projector
//! ```
//!
//! Gradients are written out by hand for this fixed composition.

use std::io::{Read, Write};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::cloud::{voxelize, PointCloud};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Norm below which a projector row is treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw feature channels `C_0`.
    pub raw_feats: usize,
    pub hidden: usize,
    pub feat_dim: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub class_count: usize,
    /// Edge of the context pooling cells, meters.
    pub pool_size: f64,
    pub normalize_embeddings: bool,
}

impl ModelConfig {
    pub fn new(raw_feats: usize, class_count: usize) -> Self {
        Self {
            raw_feats,
            hidden: 64,
            feat_dim: 32,
            proj_hidden: 32,
            embed_dim: 16,
            class_count,
            pool_size: 0.5,
            normalize_embeddings: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        3 + self.raw_feats
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.feat_dim == 0 || self.proj_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embedding width must be at least 2".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if !(self.pool_size > 0.0) {
            return Err(Error::Config("pool_size must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable tensors. Weights are stored `(in, out)`.
///
/// The same struct carries parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
    pub wp1: Array2<f64>,
    pub bp1: Array1<f64>,
    pub wp2: Array2<f64>,
    pub bp2: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 10] = ["w1", "b1", "w2", "b2", "wc", "bc", "wp1", "bp1", "wp2", "bp2"];

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let d0 = config.input_dim();
        let (h, cf, hp, ce, k) =
            (config.hidden, config.feat_dim, config.proj_hidden, config.embed_dim, config.class_count);
        Self {
            config,
            w1: Array2::zeros((d0, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((2 * h, cf)),
            b2: Array1::zeros(cf),
            wc: Array2::zeros((cf, k)),
            bc: Array1::zeros(k),
            wp1: Array2::zeros((cf, hp)),
            bp1: Array1::zeros(hp),
            wp2: Array2::zeros((hp, ce)),
            bp2: Array1::zeros(ce),
        }
    }

    /// He-uniform weights, small positive hidden biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = rng_for(seed, &[0x9a7a]);
        let fill = |w: &mut Array2<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = (6.0 / w.nrows() as f64).sqrt();
            let u = Uniform::new(-bound, bound).unwrap();
            w.iter_mut().for_each(|v| *v = u.sample(rng));
        };
        fill(&mut p.w1, &mut rng);
        fill(&mut p.w2, &mut rng);
        fill(&mut p.wc, &mut rng);
        fill(&mut p.wp1, &mut rng);
        fill(&mut p.wp2, &mut rng);
        p.wc.mapv_inplace(|v| v * 0.5);
        p.b1.fill(0.01);
        p.b2.fill(0.01);
        p.bp1.fill(0.01);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Tensors in `TENSOR_NAMES` order, as flat slices with their shapes.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64], Vec<usize>)> {
        fn t2(a: &Array2<f64>) -> (&[f64], Vec<usize>) {
            (a.as_slice().expect("standard layout"), a.shape().to_vec())
        }
        fn t1(a: &Array1<f64>) -> (&[f64], Vec<usize>) {
            (a.as_slice().expect("standard layout"), a.shape().to_vec())
        }
        let list = [
            t2(&self.w1),
            t1(&self.b1),
            t2(&self.w2),
            t1(&self.b2),
            t2(&self.wc),
            t1(&self.bc),
            t2(&self.wp1),
            t1(&self.bp1),
            t2(&self.wp2),
            t1(&self.bp2),
        ];
        TENSOR_NAMES.iter().zip(list).map(|(n, (d, s))| (*n, d, s)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.wc.as_slice_mut().unwrap(),
            self.bc.as_slice_mut().unwrap(),
            self.wp1.as_slice_mut().unwrap(),
            self.bp1.as_slice_mut().unwrap(),
            self.wp2.as_slice_mut().unwrap(),
            self.bp2.as_slice_mut().unwrap(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.1.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        let src = other.tensors();
        for (dst, (_, s, _)) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s).for_each(|(d, v)| *d += alpha * v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, d, _)| d.iter().all(|v| v.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, d, _)| d.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        for v in [c.raw_feats, c.hidden, c.feat_dim, c.proj_hidden, c.embed_dim, c.class_count] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&c.pool_size.to_le_bytes())?;
        w.write_all(&[c.normalize_embeddings as u8])?;
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, data, shape) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = read_u32(r)? as usize;
        }
        let pool_size = read_f64(r)?;
        let mut flag = [0u8];
        r.read_exact(&mut flag).map_err(eof)?;
        let config = ModelConfig {
            raw_feats: dims[0],
            hidden: dims[1],
            feat_dim: dims[2],
            proj_hidden: dims[3],
            embed_dim: dims[4],
            class_count: dims[5],
            pool_size,
            normalize_embeddings: flag[0] != 0,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut params = Self::zeros(config);
        let expected: Vec<(&str, Vec<usize>)> =
            params.tensors().into_iter().map(|(n, _, s)| (n, s)).collect();
        let count = read_u32(r)? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", expected.len())));
        }
        for ((name, shape), dst) in expected.into_iter().zip(params.tensors_mut()) {
            let len = read_u32(r)? as usize;
            if len > 64 {
                return Err(Error::Format("tensor name too long".into()));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(eof)?;
            if buf != name.as_bytes() {
                return Err(Error::Format(format!("expected tensor {name}")));
            }
            let ndim = read_u32(r)? as usize;
            let got: Vec<usize> = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
            if got != shape {
                return Err(Error::Format(format!("tensor {name}: shape {got:?}, expected {shape:?}")));
            }
            for v in dst.iter_mut() {
                *v = read_f64(r)?;
            }
        }
        Ok(params)
    }
}

fn eof(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("unexpected end of checkpoint".into()),
        _ => Error::Io(e),
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(eof)?;
    Ok(f64::from_le_bytes(b))
}

/// Cached backbone intermediates.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    x: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    pooled: Array2<f64>,
    cell_of: Vec<usize>,
    cell_sizes: Vec<usize>,
    a2: Array2<f64>,
}

/// Cached projector intermediates.
#[derive(Debug, Clone)]
pub struct ProjectorCache {
    a3: Array2<f64>,
    q: Array2<f64>,
    norms: Array1<f64>,
    embeddings: Array2<f64>,
    /// Rows whose pre-normalization norm fell below `NORM_EPS`.
    pub degenerate_rows: usize,
}

/// Everything one forward pass produced, enough to backpropagate exactly.
#[derive(Debug, Clone)]
pub struct Activations {
    backbone: BackboneCache,
    features: Array2<f64>,
    projector: Option<ProjectorCache>,
}

impl Activations {
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Pre-activation values of every ReLU, for kink diagnostics.
    pub fn preactivations(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.backbone.a1, &self.backbone.a2];
        if let Some(p) = &self.projector {
            v.push(&p.a3);
        }
        v
    }
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub scores: Array2<f64>,
    pub embeddings: Option<Array2<f64>>,
    pub acts: Activations,
}

/// Upstream gradients for `backward`.
#[derive(Debug, Clone, Default)]
pub struct GradOutputs {
    pub scores: Option<Array2<f64>>,
    pub embeddings: Option<Array2<f64>>,
}

/// Gradients with respect to the network input.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub coords: Array2<f64>,
    pub feats: Array2<f64>,
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

fn affine(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Network input `[coords, feats]`.
pub fn input_matrix(cloud: &PointCloud) -> Array2<f64> {
    let n = cloud.len();
    let c0 = cloud.feat_dim();
    let mut x = Array2::zeros((n, 3 + c0));
    for (i, p) in cloud.coords().iter().enumerate() {
        x[[i, 0]] = p[0];
        x[[i, 1]] = p[1];
        x[[i, 2]] = p[2];
    }
    x.slice_mut(s![.., 3..]).assign(cloud.feats());
    x
}

/// Per-point features `F` and the cache needed to differentiate them.
pub fn backbone_forward(params: &ModelParams, cloud: &PointCloud) -> Result<(Array2<f64>, BackboneCache)> {
    let cfg = &params.config;
    if cloud.is_empty() {
        return Err(Error::InvalidInput("empty cloud".into()));
    }
    if cloud.feat_dim() != cfg.raw_feats {
        return Err(Error::Shape(format!(
            "cloud has {} feature channels, model expects {}",
            cloud.feat_dim(),
            cfg.raw_feats
        )));
    }
    let x = input_matrix(cloud);
    let a1 = affine(&x.view(), &params.w1, &params.b1);
    let h1 = relu(&a1);

    let grid = voxelize(cloud.coords(), cfg.pool_size)?;
    let cell_of = grid.cell_of().to_vec();
    let cells = grid.cell_count();
    let cell_sizes: Vec<usize> = (0..cells).map(|c| grid.members(c).len()).collect();
    let mut sums = Array2::<f64>::zeros((cells, cfg.hidden));
    // Members are visited in ascending point order, so each cell sum is a
    // fixed-order reduction over the same set of rows.
    for c in 0..cells {
        let mut row = sums.row_mut(c);
        for &i in grid.members(c) {
            row += &h1.row(i);
        }
        row /= cell_sizes[c] as f64;
    }
    let pooled = sums.select(Axis(0), &cell_of);

    let z = concatenate(Axis(1), &[h1.view(), pooled.view()]).expect("same row count");
    let a2 = affine(&z.view(), &params.w2, &params.b2);
    let features = relu(&a2);
    Ok((features, BackboneCache { x, a1, h1, pooled, cell_of, cell_sizes, a2 }))
}

/// Semantic scores `S = F Wc + bc`.
pub fn classifier_forward(params: &ModelParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != params.wc.nrows() {
        return Err(Error::Shape(format!(
            "features have {} columns, classifier expects {}",
            features.ncols(),
            params.wc.nrows()
        )));
    }
    Ok(affine(&features.view(), &params.wc, &params.bc))
}

/// Embeddings `E`, row-normalized unless normalization is disabled.
pub fn projector_forward(params: &ModelParams, features: &Array2<f64>) -> Result<(Array2<f64>, ProjectorCache)> {
    if features.ncols() != params.wp1.nrows() {
        return Err(Error::Shape(format!(
            "features have {} columns, projector expects {}",
            features.ncols(),
            params.wp1.nrows()
        )));
    }
    let a3 = affine(&features.view(), &params.wp1, &params.bp1);
    let q = relu(&a3);
    let mut u = affine(&q.view(), &params.wp2, &params.bp2);
    let mut norms = Array1::ones(u.nrows());
    let mut degenerate_rows = 0;
    if params.config.normalize_embeddings {
        for (mut row, n) in u.rows_mut().into_iter().zip(norms.iter_mut()) {
            let norm = row.dot(&row).sqrt();
            if norm < NORM_EPS {
                degenerate_rows += 1;
            }
            *n = norm.max(NORM_EPS);
            row /= *n;
        }
    }
    let cache = ProjectorCache { a3, q, norms, embeddings: u.clone(), degenerate_rows };
    Ok((u, cache))
}

/// Backbone, classifier, and optionally projector on one cloud.
pub fn forward(params: &ModelParams, cloud: &PointCloud, with_projector: bool) -> Result<Forward> {
    let (features, backbone) = backbone_forward(params, cloud)?;
    let scores = classifier_forward(params, &features)?;
    let (embeddings, projector) = if with_projector {
        let (e, c) = projector_forward(params, &features)?;
        (Some(e), Some(c))
    } else {
        (None, None)
    };
    Ok(Forward { scores, embeddings, acts: Activations { backbone, features, projector } })
}

/// Exact reverse-mode gradients of the forward composition.
pub fn backward(params: &ModelParams, acts: &Activations, grads: &GradOutputs) -> Result<(ModelParams, InputGrads)> {
    let n = acts.len();
    let bb = &acts.backbone;
    if bb.x.ncols() != params.w1.nrows() || acts.features.ncols() != params.wc.nrows() {
        return Err(Error::Shape("activations do not match these parameters".into()));
    }
    let mut g = params.zeros_like();
    let mut d_feat = Array2::<f64>::zeros((n, params.config.feat_dim));

    if let Some(ds) = &grads.scores {
        if ds.dim() != (n, params.config.class_count) {
            return Err(Error::Shape(format!("score gradient is {:?}", ds.dim())));
        }
        g.wc = acts.features.t().dot(ds);
        g.bc = ds.sum_axis(Axis(0));
        d_feat += &ds.dot(&params.wc.t());
    }

    if let Some(de) = &grads.embeddings {
        let pc = acts
            .projector
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("embedding gradient without a projector pass".into()))?;
        if de.dim() != (n, params.config.embed_dim) {
            return Err(Error::Shape(format!("embedding gradient is {:?}", de.dim())));
        }
        let du = if params.config.normalize_embeddings {
            let mut du = de.clone();
            Zip::from(du.rows_mut())
                .and(pc.embeddings.rows())
                .and(&pc.norms)
                .for_each(|mut d, e, &norm| {
                    if norm > NORM_EPS {
                        let proj = e.dot(&d);
                        d.scaled_add(-proj, &e);
                    }
                    d /= norm;
                });
            du
        } else {
            de.clone()
        };
        g.wp2 = pc.q.t().dot(&du);
        g.bp2 = du.sum_axis(Axis(0));
        let mut da3 = du.dot(&params.wp2.t());
        Zip::from(&mut da3).and(&pc.a3).for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        g.wp1 = acts.features.t().dot(&da3);
        g.bp1 = da3.sum_axis(Axis(0));
        d_feat += &da3.dot(&params.wp1.t());
    }

    // F = relu(a2)
    let mut da2 = d_feat;
    Zip::from(&mut da2).and(&bb.a2).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
    let h = params.config.hidden;
    g.w2.slice_mut(s![..h, ..]).assign(&bb.h1.t().dot(&da2));
    g.w2.slice_mut(s![h.., ..]).assign(&bb.pooled.t().dot(&da2));
    g.b2 = da2.sum_axis(Axis(0));
    let dz = da2.dot(&params.w2.t());
    let mut dh1 = dz.slice(s![.., ..h]).to_owned();
    let dp = dz.slice(s![.., h..]);

    // pooled rows are cell means of h1
    let mut cell_grad = Array2::<f64>::zeros((bb.cell_sizes.len(), h));
    for (i, &c) in bb.cell_of.iter().enumerate() {
        let mut row = cell_grad.row_mut(c);
        row += &dp.row(i);
    }
    for (mut row, &size) in cell_grad.rows_mut().into_iter().zip(&bb.cell_sizes) {
        row /= size as f64;
    }
    for (i, &c) in bb.cell_of.iter().enumerate() {
        let mut row = dh1.row_mut(i);
        row += &cell_grad.row(c);
    }

    let mut da1 = dh1;
    Zip::from(&mut da1).and(&bb.a1).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
    g.w1 = bb.x.t().dot(&da1);
    g.b1 = da1.sum_axis(Axis(0));
    let dx = da1.dot(&params.w1.t());
    let inputs = InputGrads { coords: dx.slice(s![.., ..3]).to_owned(), feats: dx.slice(s![.., 3..]).to_owned() };
    Ok((g, inputs))
}

/// Random parameters drawn uniformly in `[-scale, scale]`, biases included.
pub fn random_params(config: ModelConfig, scale: f64, seed: u64) -> ModelParams {
    let mut p = ModelParams::zeros(config);
    let mut rng = rng_for(seed, &[0x7e57]);
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            raw_feats: 2,
            hidden: 6,
            feat_dim: 5,
            proj_hidden: 4,
            embed_dim: 3,
            class_count: 4,
            pool_size: 0.7,
            normalize_embeddings: true,
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n).map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..1.0)]).collect();
        let feats = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        PointCloud::new(pts, feats, None).unwrap()
    }

    /// Straight-line re-implementation of the forward pass with explicit loops.
    fn naive_forward(p: &ModelParams, cloud: &PointCloud) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let c = &p.config;
        let n = cloud.len();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = cloud.coords()[i].to_vec();
                r.extend(cloud.feats().row(i).iter());
                r
            })
            .collect();
        let dense = |inp: &[f64], w: &Array2<f64>, b: &Array1<f64>, act: bool| -> Vec<f64> {
            (0..w.ncols())
                .map(|o| {
                    let v = b[o] + (0..w.nrows()).map(|k| inp[k] * w[[k, o]]).sum::<f64>();
                    if act { v.max(0.0) } else { v }
                })
                .collect()
        };
        let h1: Vec<Vec<f64>> = x.iter().map(|r| dense(r, &p.w1, &p.b1, true)).collect();
        let key = |i: usize| crate::cloud::cell_key(&cloud.coords()[i], c.pool_size);
        let mut feats = Vec::new();
        for i in 0..n {
            let same: Vec<usize> = (0..n).filter(|&k| key(k) == key(i)).collect();
            let pooled: Vec<f64> =
                (0..c.hidden).map(|d| same.iter().map(|&k| h1[k][d]).sum::<f64>() / same.len() as f64).collect();
            let z: Vec<f64> = h1[i].iter().chain(&pooled).copied().collect();
            feats.push(dense(&z, &p.w2, &p.b2, true));
        }
        let scores = feats.iter().map(|f| dense(f, &p.wc, &p.bc, false)).collect();
        let emb = feats
            .iter()
            .map(|f| {
                let q = dense(f, &p.wp1, &p.bp1, true);
                let u = dense(&q, &p.wp2, &p.bp2, false);
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                u.iter().map(|v| v / norm).collect()
            })
            .collect();
        (feats, scores, emb)
    }

    #[test]
    fn zero_params_give_zero_features() {
        let p = ModelParams::zeros(small_config());
        let (f, _) = backbone_forward(&p, &random_cloud(20, 1)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        let s = classifier_forward(&p, &f).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_loop_oracle() {
        for seed in 0..5 {
            let p = random_params(small_config(), 0.8, seed);
            let cloud = random_cloud(40, seed + 100);
            let out = forward(&p, &cloud, true).unwrap();
            let (f, s, e) = naive_forward(&p, &cloud);
            let emb = out.embeddings.as_ref().unwrap();
            for i in 0..cloud.len() {
                for d in 0..f[i].len() {
                    assert!((out.acts.features[[i, d]] - f[i][d]).abs() < 1e-12);
                }
                for d in 0..s[i].len() {
                    assert!((out.scores[[i, d]] - s[i][d]).abs() < 1e-12);
                }
                for d in 0..e[i].len() {
                    assert!((emb[[i, d]] - e[i][d]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn classifier_with_identity_weights_passes_features_through() {
        let mut cfg = small_config();
        cfg.class_count = cfg.feat_dim;
        let mut p = ModelParams::zeros(cfg);
        p.wc = Array2::eye(cfg.feat_dim);
        let f = Array2::from_shape_fn((7, cfg.feat_dim), |(i, j)| (i * 3 + j) as f64 - 4.0);
        assert_eq!(classifier_forward(&p, &f).unwrap(), f);
        p.bc.fill(2.5);
        let z = classifier_forward(&p, &Array2::zeros((3, cfg.feat_dim))).unwrap();
        assert!(z.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn projector_rows_are_unit_norm() {
        let p = random_params(small_config(), 1.0, 4);
        let f = Array2::from_shape_fn((30, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let (e, cache) = projector_forward(&p, &f).unwrap();
        assert_eq!(cache.degenerate_rows, 0);
        for row in e.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        let mut z = ModelParams::zeros(small_config());
        z.bp2 = Array1::from(vec![3.0, 0.0, 4.0]);
        let (e, _) = projector_forward(&z, &f).unwrap();
        for row in e.rows() {
            assert!((row[0] - 0.6).abs() < 1e-15 && (row[2] - 0.8).abs() < 1e-15);
        }
        let (_, cache) = projector_forward(&ModelParams::zeros(small_config()), &f).unwrap();
        assert_eq!(cache.degenerate_rows, 30);
    }

    #[test]
    fn permutation_equivariance() {
        let p = random_params(small_config(), 0.8, 9);
        let cloud = random_cloud(50, 10);
        let mut perm: Vec<usize> = (0..50).collect();
        perm.reverse();
        perm.swap(3, 17);
        let shuffled = cloud.select(&perm);
        let a = forward(&p, &cloud, true).unwrap();
        let b = forward(&p, &shuffled, true).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for d in 0..a.scores.ncols() {
                assert!((a.scores[[i, d]] - b.scores[[k, d]]).abs() < 1e-12);
            }
            let (ea, eb) = (a.embeddings.as_ref().unwrap(), b.embeddings.as_ref().unwrap());
            for d in 0..ea.ncols() {
                assert!((ea[[i, d]] - eb[[k, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = random_params(small_config(), 0.8, 11);
        let out = forward(&p, &random_cloud(30, 12), true).unwrap();
        let g = GradOutputs {
            scores: Some(Array2::zeros(out.scores.dim())),
            embeddings: Some(Array2::zeros(out.embeddings.as_ref().unwrap().dim())),
        };
        let (pg, ig) = backward(&p, &out.acts, &g).unwrap();
        assert_eq!(pg.squared_norm(), 0.0);
        assert!(ig.coords.iter().chain(ig.feats.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = random_params(small_config(), 0.8, 13);
        let out = forward(&p, &random_cloud(30, 14), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut rand_like = |a: &Array2<f64>| a.mapv(|_| rng.random_range(-1.0..1.0));
        let e = out.embeddings.as_ref().unwrap();
        let g1 = GradOutputs { scores: Some(rand_like(&out.scores)), embeddings: Some(rand_like(e)) };
        let g2 = GradOutputs { scores: Some(rand_like(&out.scores)), embeddings: Some(rand_like(e)) };
        let (a, b) = (0.7, -1.3);
        let mix = GradOutputs {
            scores: Some(g1.scores.as_ref().unwrap() * a + g2.scores.as_ref().unwrap() * b),
            embeddings: Some(g1.embeddings.as_ref().unwrap() * a + g2.embeddings.as_ref().unwrap() * b),
        };
        let (p1, i1) = backward(&p, &out.acts, &g1).unwrap();
        let (p2, i2) = backward(&p, &out.acts, &g2).unwrap();
        let (pm, im) = backward(&p, &out.acts, &mix).unwrap();
        let mut expect = p1.clone();
        expect.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v *= a));
        expect.add_scaled(b, &p2);
        for ((_, x, _), (_, y, _)) in pm.tensors().iter().zip(expect.tensors().iter()) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() < 1e-10);
            }
        }
        let ie = &i1.feats * a + &i2.feats * b;
        assert!(im.feats.iter().zip(ie.iter()).all(|(u, v)| (u - v).abs() < 1e-10));
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let p = ModelParams::init(small_config(), 3).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ModelParams::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert!(ModelParams::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = ModelParams::zeros(small_config());
        let cloud = PointCloud::new(vec![[0.0; 3]], Array2::zeros((1, 5)), None).unwrap();
        assert!(matches!(backbone_forward(&p, &cloud), Err(Error::Shape(_))));
        assert!(classifier_forward(&p, &Array2::zeros((2, 9))).is_err());
    }
}
