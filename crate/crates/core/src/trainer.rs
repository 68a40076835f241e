//! Two-branch training loop: supervised cross entropy on labeled scenes plus
//! an unsupervised objective on paired views of unlabeled scenes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::de::IntoDeserializer;
use serde::{Deserialize, Serialize};

use crate::augment::{make_single_view, make_view_pair, AugmentConfig, ViewPair};
use crate::cloud::{PointCloud, SceneSet};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_consistency, cross_entropy, guided_contrastive, mse_consistency, point_infonce, pseudo_labels,
    self_training_loss, GuidanceStats, GuidedLossConfig, LossInput, LossValue, Negatives, PseudoLabels,
};
use crate::metrics::ConfusionMatrix;
use crate::model::{backward, forward, Forward, GradOutputs, ModelConfig, ModelParams};
use crate::sampling::{cbs_positive_pairs, random_indices, random_positive_pairs, MemoryBank, PairPool, SamplerKind};
use crate::seed::rng_for;
use crate::synth::{Preset, FEAT_DIM};

const LABELED_STREAM: u64 = 0x1ab;
const UNLABELED_STREAM: u64 = 0x0b1;
const AUGMENT_STREAM: u64 = 0xa06;
const SAMPLER_STREAM: u64 = 0x5a3;
const BANK_STREAM: u64 = 0xba4;
const STATE_MAGIC: &[u8; 8] = b"GPCLTRN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SupOnly,
    Mse,
    Cosine,
    PointInfonce,
    SelfTraining,
    Guided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdPoly,
    AdamCosine,
}

/// Where the unlabeled views come from when the unlabeled set is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullRatioPairing {
    /// Labeled scenes drawn through their own unlabeled iterator.
    Independent,
    /// Unlabeled slot `k` reuses the scene of labeled slot `k mod labeled_batch`.
    SameScene,
}

/// Parses a lowercase enum name the same way the config file does.
pub fn parse_name<'de, T: Deserialize<'de>>(s: &'de str) -> Result<T> {
    T::deserialize(s.into_deserializer()).map_err(|e: serde::de::value::Error| Error::Config(e.to_string()))
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_name(s)
    }
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_name(s)
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_name(s)
    }
}

/// Every knob of a training run. Loaded from a flat TOML file whose keys are
/// exactly these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Weight of the unsupervised loss.
    pub lambda: f64,
    pub tau: f64,
    pub gamma: f64,
    pub label_guidance: bool,
    pub confidence_guidance: bool,
    pub renormalize_gated: bool,
    pub sampler: SamplerKind,
    /// Positive pairs per scene.
    pub k_pos: usize,
    /// Negatives per scene.
    pub k_neg: usize,
    /// Per-class bank capacity.
    pub bank_capacity: usize,
    /// Entries pushed per class per step.
    pub bank_update: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Exponent of the poly schedule.
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub hidden: usize,
    pub feat_dim: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub pool_size: f64,
    pub preset: Preset,
    pub crop_size: f64,
    pub min_overlap_points: usize,
    pub max_retries: usize,
    pub full_ratio_pairing: FullRatioPairing,
    /// Parameters to start from instead of a fresh initialization.
    pub init_checkpoint: Option<String>,
    /// Frozen model producing the self-training labels.
    pub pseudo_from: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = GuidedLossConfig::default();
        let aug = AugmentConfig::indoor();
        Self {
            strategy: Strategy::Guided,
            lambda: 0.1,
            tau: loss.tau,
            gamma: loss.gamma,
            label_guidance: loss.label_guidance,
            confidence_guidance: loss.confidence_guidance,
            renormalize_gated: loss.renormalize_gated,
            sampler: SamplerKind::Cbs,
            k_pos: 1024,
            k_neg: 2048,
            bank_capacity: 256,
            bank_update: 8,
            optimizer: OptimizerKind::SgdPoly,
            lr: 0.1,
            power: 0.9,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            labeled_batch: 4,
            unlabeled_batch: 4,
            total_iters: 2000,
            warmup_iters: 50,
            seed: 0,
            eval_every: 200,
            hidden: 64,
            feat_dim: 32,
            proj_hidden: 32,
            embed_dim: 16,
            pool_size: 0.5,
            preset: Preset::Indoor,
            crop_size: aug.crop_size,
            min_overlap_points: aug.min_overlap_points,
            max_retries: aug.max_retries,
            full_ratio_pairing: FullRatioPairing::Independent,
            init_checkpoint: None,
            pseudo_from: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss_config(&self) -> GuidedLossConfig {
        GuidedLossConfig {
            tau: self.tau,
            gamma: self.gamma,
            label_guidance: self.label_guidance,
            confidence_guidance: self.confidence_guidance,
            renormalize_gated: self.renormalize_gated,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop_size: self.crop_size,
            min_overlap_points: self.min_overlap_points,
            max_retries: self.max_retries,
            seed: self.seed,
            ..AugmentConfig::for_preset(self.preset)
        }
    }

    pub fn model_config(&self, class_count: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            feat_dim: self.feat_dim,
            proj_hidden: self.proj_hidden,
            embed_dim: self.embed_dim,
            pool_size: self.pool_size,
            ..ModelConfig::new(FEAT_DIM, class_count)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be a finite nonnegative weight".into()));
        }
        if self.warmup_iters > self.total_iters {
            return Err(Error::Config("warmup_iters exceeds total_iters".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.power >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("power, momentum or weight_decay out of range".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam coefficients out of range".into()));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.k_pos == 0 || self.k_neg == 0 {
            return Err(Error::Config("k_pos and k_neg must be positive".into()));
        }
        if self.bank_capacity == 0 || self.bank_update == 0 {
            return Err(Error::Config("bank_capacity and bank_update must be positive".into()));
        }
        if self.strategy == Strategy::SelfTraining && self.pseudo_from.is_none() {
            return Err(Error::Config("self_training needs pseudo_from".into()));
        }
        self.loss_config().validate()?;
        self.augment_config().validate()?;
        self.model_config(2).validate()
    }

    /// Whether the unsupervised branch runs at `iteration`.
    pub fn unsupervised_active(&self, iteration: usize) -> bool {
        self.strategy != Strategy::SupOnly && iteration >= self.warmup_iters
    }

    fn uses_bank(&self) -> bool {
        self.strategy == Strategy::Guided && self.sampler == SamplerKind::Cbs
    }
}

/// Learning rate at step `t` of `total`.
pub fn learning_rate(cfg: &TrainConfig, t: usize) -> f64 {
    if cfg.total_iters == 0 {
        return cfg.lr;
    }
    let frac = t as f64 / cfg.total_iters as f64;
    match cfg.optimizer {
        OptimizerKind::SgdPoly => cfg.lr * (1.0 - frac).max(0.0).powf(cfg.power),
        OptimizerKind::AdamCosine => cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    }
}

/// Optimizer moments. `first` is the SGD velocity or the Adam mean.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: ModelParams,
    pub second: ModelParams,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub bank: Option<MemoryBank>,
    /// Steps completed so far.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: ModelParams, cfg: &TrainConfig) -> Self {
        let bank = cfg.uses_bank().then(|| {
            MemoryBank::new(params.config.class_count, cfg.bank_capacity, cfg.bank_update, params.config.embed_dim)
        });
        let optimizer = OptimizerState { first: params.zeros_like(), second: params.zeros_like() };
        Self { params, optimizer, bank, iteration: 0 }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(STATE_MAGIC)?;
        w.write_all(&(self.iteration as u64).to_le_bytes())?;
        self.params.write_to(w)?;
        self.optimizer.first.write_to(w)?;
        self.optimizer.second.write_to(w)?;
        match &self.bank {
            Some(b) => {
                w.write_all(&[1])?;
                b.write_to(w)?;
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated training state".into()))?;
        if &magic != STATE_MAGIC {
            return Err(Error::Format("not a training state file".into()));
        }
        let mut it = [0u8; 8];
        r.read_exact(&mut it).map_err(|_| Error::Format("truncated training state".into()))?;
        let params = ModelParams::read_from(r)?;
        let first = ModelParams::read_from(r)?;
        let second = ModelParams::read_from(r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|_| Error::Format("truncated training state".into()))?;
        let bank = match flag[0] {
            0 => None,
            1 => Some(MemoryBank::read_from(r)?),
            _ => return Err(Error::Format("bad bank flag".into())),
        };
        if first.config != params.config || second.config != params.config {
            return Err(Error::Format("optimizer moments do not match the parameters".into()));
        }
        Ok(Self { params, optimizer: OptimizerState { first, second }, bank, iteration: u64::from_le_bytes(it) as usize })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    params.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    ModelParams::read_from(&mut BufReader::new(File::open(path)?))
}

/// Training scenes plus an optional labeled evaluation set.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub labeled: SceneSet,
    pub unlabeled: SceneSet,
    pub eval: Option<SceneSet>,
}

/// One unlabeled scene seen as two views.
#[derive(Debug, Clone)]
pub struct UnlabeledItem {
    pub pair: ViewPair,
    /// Self-training labels of each view.
    pub fixed: Option<(Vec<i32>, Vec<i32>)>,
}

/// Inputs of one step, prepared from the iteration counter alone.
#[derive(Debug, Clone)]
pub struct Batch {
    pub iteration: usize,
    pub labeled: Vec<PointCloud>,
    pub unlabeled: Vec<UnlabeledItem>,
    /// Unlabeled scenes dropped for lack of overlapping views.
    pub skipped: usize,
}

/// Scene index for `slot` of `iteration` in a stream that reshuffles every epoch.
pub fn scene_index(seed: u64, stream: u64, scenes: usize, batch: usize, iteration: usize, slot: usize) -> usize {
    let k = (iteration * batch + slot) as u64;
    let n = scenes as u64;
    let mut order: Vec<usize> = (0..scenes).collect();
    order.shuffle(&mut rng_for(seed, &[stream, k / n]));
    order[(k % n) as usize]
}

/// Labels of `view` looked up by origin id.
fn lookup_labels(view: &PointCloud, table: &HashMap<u32, i32>) -> Vec<i32> {
    view.origin_ids().iter().map(|id| table.get(id).copied().unwrap_or(crate::IGNORE)).collect()
}

/// Argmax labels of a frozen model on each unlabeled scene, keyed by origin id.
pub fn fixed_pseudo_labels(params: &ModelParams, scenes: &SceneSet) -> Result<Vec<HashMap<u32, i32>>> {
    scenes
        .scenes
        .iter()
        .map(|scene| {
            let f = forward(params, scene, false)?;
            let pl = pseudo_labels(f.scores.view());
            Ok(scene.origin_ids().iter().copied().zip(pl.labels.iter().map(|&c| c as i32)).collect())
        })
        .collect()
}

/// Scenes feeding the unsupervised branch: the unlabeled set, or the
/// labeled set when no unlabeled scenes exist.
pub fn unlabeled_source(data: &TrainData) -> &SceneSet {
    if data.unlabeled.is_empty() {
        &data.labeled
    } else {
        &data.unlabeled
    }
}

/// Labeled scene index for `slot` of `iteration`.
pub fn labeled_scene_index(data: &TrainData, cfg: &TrainConfig, iteration: usize, slot: usize) -> usize {
    scene_index(cfg.seed, LABELED_STREAM, data.labeled.len(), cfg.labeled_batch, iteration, slot)
}

/// Index into `unlabeled_source(data)` for `slot` of `iteration`.
pub fn unlabeled_scene_index(data: &TrainData, cfg: &TrainConfig, iteration: usize, slot: usize) -> usize {
    if data.unlabeled.is_empty() && cfg.full_ratio_pairing == FullRatioPairing::SameScene {
        labeled_scene_index(data, cfg, iteration, slot % cfg.labeled_batch)
    } else {
        scene_index(cfg.seed, UNLABELED_STREAM, unlabeled_source(data).len(), cfg.unlabeled_batch, iteration, slot)
    }
}

/// Builds the views of one step.
pub fn prepare_batch(
    iteration: usize,
    data: &TrainData,
    fixed: Option<&[HashMap<u32, i32>]>,
    cfg: &TrainConfig,
) -> Result<Batch> {
    if data.labeled.is_empty() {
        return Err(Error::InvalidInput("no labeled scenes".into()));
    }
    let aug = cfg.augment_config();
    let mut labeled = Vec::with_capacity(cfg.labeled_batch);
    for slot in 0..cfg.labeled_batch {
        let s = labeled_scene_index(data, cfg, iteration, slot);
        let view_seed = crate::seed::derive_seed(AUGMENT_STREAM, &[LABELED_STREAM, iteration as u64, slot as u64]);
        labeled.push(make_single_view(&data.labeled.scenes[s], &aug, view_seed)?);
    }
    let mut unlabeled = Vec::new();
    let mut skipped = 0;
    let source = unlabeled_source(data);
    if cfg.unsupervised_active(iteration) && !source.is_empty() {
        for slot in 0..cfg.unlabeled_batch {
            let s = unlabeled_scene_index(data, cfg, iteration, slot);
            let pair_seed = crate::seed::derive_seed(AUGMENT_STREAM, &[UNLABELED_STREAM, iteration as u64, slot as u64]);
            match make_view_pair(&source.scenes[s], &aug, pair_seed) {
                Ok(pair) => {
                    let fixed = fixed.map(|tables| {
                        (lookup_labels(&pair.view1, &tables[s]), lookup_labels(&pair.view2, &tables[s]))
                    });
                    unlabeled.push(UnlabeledItem { pair, fixed });
                }
                Err(Error::OverlapUnsatisfiable { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Batch { iteration, labeled, unlabeled, skipped })
}

/// What one step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    pub loss_l: f64,
    /// Absent while the unsupervised branch is off.
    pub loss_u: Option<f64>,
    /// `loss_l + lambda * loss_u`.
    pub loss: f64,
    pub stats: GuidanceStats,
    /// Norm of the unsupervised gradient actually applied.
    pub unsup_grad_norm: f64,
    /// Parameter version seen by every forward pass of the step.
    pub forward_versions: Vec<usize>,
    pub skipped: usize,
    /// Scenes whose view-1 anchors drew negatives from the bank.
    pub bank_negative_scenes: usize,
}

fn check_finite(what: &str, v: f64, batch: &Batch) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    let labeled: Vec<String> = batch.labeled.iter().map(|c| format!("{} pts", c.len())).collect();
    let unlabeled: Vec<String> = batch
        .unlabeled
        .iter()
        .map(|u| format!("{}/{} pts, {} matches", u.pair.view1.len(), u.pair.view2.len(), u.pair.matches.len()))
        .collect();
    Err(Error::NonFinite(format!(
        "{what} = {v} at iteration {}; labeled views [{}]; unlabeled pairs [{}]",
        batch.iteration,
        labeled.join(", "),
        unlabeled.join(", ")
    )))
}

fn sample_pairs(
    cfg: &TrainConfig,
    matches: &[(usize, usize)],
    pl1: Option<&PseudoLabels>,
    class_count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    match (cfg.sampler, pl1) {
        (SamplerKind::Cbs, Some(pl)) => {
            let pool = PairPool::new(matches.to_vec(), &pl.labels, class_count)?;
            cbs_positive_pairs(&pool, cfg.k_pos, rng)
        }
        _ => random_positive_pairs(matches, cfg.k_pos, rng),
    }
}

fn embedding_grads(loss: &LossValue) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
    (loss.grad(LossInput::Embeddings1).cloned(), loss.grad(LossInput::Embeddings2).cloned())
}

/// Unsupervised loss of one scene and the upstream gradients of both views.
struct SceneLoss {
    value: f64,
    stats: GuidanceStats,
    /// `None` when the loss has no gradient at all.
    grads: Option<(GradOutputs, GradOutputs)>,
    used_bank: bool,
}

#[allow(clippy::too_many_arguments)]
fn unsupervised_scene(
    cfg: &TrainConfig,
    item: &UnlabeledItem,
    f1: &Forward,
    f2: &Forward,
    pls: Option<&(PseudoLabels, PseudoLabels)>,
    bank: Option<&MemoryBank>,
    class_count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SceneLoss> {
    let matches = &item.pair.matches;
    let plain = |loss: LossValue| {
        let (g1, g2) = embedding_grads(&loss);
        SceneLoss {
            value: loss.value,
            stats: loss.stats,
            grads: Some((
                GradOutputs { scores: None, embeddings: g1 },
                GradOutputs { scores: None, embeddings: g2 },
            )),
            used_bank: false,
        }
    };
    Ok(match cfg.strategy {
        Strategy::SupOnly => unreachable!("no unsupervised branch"),
        Strategy::Mse => {
            let pairs = sample_pairs(cfg, matches, pls.map(|p| &p.0), class_count, rng)?;
            plain(mse_consistency(&pairs, emb(f1), emb(f2))?)
        }
        Strategy::Cosine => {
            let pairs = sample_pairs(cfg, matches, pls.map(|p| &p.0), class_count, rng)?;
            plain(cosine_consistency(&pairs, emb(f1), emb(f2))?)
        }
        Strategy::PointInfonce => {
            let pairs = sample_pairs(cfg, matches, pls.map(|p| &p.0), class_count, rng)?;
            plain(point_infonce(&pairs, emb(f1), emb(f2), cfg.tau)?)
        }
        Strategy::SelfTraining => {
            let (y1, y2) = item.fixed.as_ref().ok_or_else(|| Error::Config("self_training needs pseudo_from".into()))?;
            let l1 = self_training_loss(f1.scores.view(), y1)?;
            let l2 = self_training_loss(f2.scores.view(), y2)?;
            let half = |l: &LossValue| l.grad(LossInput::Scores).map(|g| g * 0.5);
            SceneLoss {
                value: 0.5 * (l1.value + l2.value),
                stats: GuidanceStats::default(),
                grads: Some((
                    GradOutputs { scores: half(&l1), embeddings: None },
                    GradOutputs { scores: half(&l2), embeddings: None },
                )),
                used_bank: false,
            }
        }
        Strategy::Guided => {
            let (pl1, pl2) = pls.expect("pseudo labels for the guided loss");
            let pairs = sample_pairs(cfg, matches, Some(pl1), class_count, rng)?;
            let loss_cfg = cfg.loss_config();
            let bank_draw = match bank {
                // in-cloud negatives until the bank holds a quarter of k_neg
                Some(b) if 4 * b.population() >= cfg.k_neg => Some(b.sample_negatives(cfg.k_neg, rng)?),
                _ => None,
            };
            let loss = match &bank_draw {
                Some(d) => guided_contrastive(
                    &pairs,
                    emb(f1),
                    emb(f2),
                    pl1,
                    pl2,
                    Negatives::Bank { embeddings: d.embeddings.view(), classes: &d.classes },
                    &loss_cfg,
                )?,
                None => {
                    let neg2 = random_indices(item.pair.view2.len(), cfg.k_neg, rng);
                    let neg1 = random_indices(item.pair.view1.len(), cfg.k_neg, rng);
                    guided_contrastive(
                        &pairs,
                        emb(f1),
                        emb(f2),
                        pl1,
                        pl2,
                        Negatives::InCloud { neg1: &neg1, neg2: &neg2 },
                        &loss_cfg,
                    )?
                }
            };
            let active = !loss_cfg.confidence_guidance || loss.stats.gates_open > 0;
            let mut out = plain(loss);
            out.used_bank = bank_draw.is_some();
            if !active {
                out.grads = None;
            }
            out
        }
    })
}

fn emb(f: &Forward) -> ndarray::ArrayView2<'_, f64> {
    f.embeddings.as_ref().expect("projector pass").view()
}

fn scale_outputs(g: GradOutputs, s: f64) -> GradOutputs {
    GradOutputs { scores: g.scores.map(|a| a * s), embeddings: g.embeddings.map(|a| a * s) }
}

/// One optimizer update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepReport> {
    let t = state.iteration;
    if batch.iteration != t {
        return Err(Error::InvalidInput(format!("batch for iteration {} given at {t}", batch.iteration)));
    }
    let params = &state.params;
    let class_count = params.config.class_count;
    let mut versions = Vec::new();

    // supervised branch
    let mut grad = params.zeros_like();
    let views: Vec<&PointCloud> = batch.labeled.iter().filter(|v| v.labels().is_some_and(|l| l.iter().any(|&y| y >= 0))).collect();
    if views.is_empty() {
        return Err(Error::InvalidInput("labeled batch has no labeled point".into()));
    }
    let inv_l = 1.0 / views.len() as f64;
    let mut loss_l = 0.0;
    for view in &views {
        let f = forward(params, view, false)?;
        versions.push(t);
        let ce = cross_entropy(f.scores.view(), view.labels().expect("filtered"))?;
        loss_l += ce.value * inv_l;
        let ds = ce.grad(LossInput::Scores).expect("score gradient") * inv_l;
        let (g, _) = backward(params, &f.acts, &GradOutputs { scores: Some(ds), embeddings: None })?;
        grad.add_scaled(1.0, &g);
    }
    check_finite("supervised loss", loss_l, batch)?;

    // unsupervised branch
    let mut loss_u = None;
    let mut stats = GuidanceStats::default();
    let mut grad_u: Option<ModelParams> = None;
    let mut bank_sources: Vec<(Array2<f64>, PseudoLabels)> = Vec::new();
    let mut bank_scenes = 0;
    if cfg.unsupervised_active(t) && !batch.unlabeled.is_empty() {
        let inv_u = 1.0 / batch.unlabeled.len() as f64;
        let with_projector = cfg.strategy != Strategy::SelfTraining;
        let mut total = 0.0;
        for (slot, item) in batch.unlabeled.iter().enumerate() {
            let f1 = forward(params, &item.pair.view1, with_projector)?;
            let f2 = forward(params, &item.pair.view2, with_projector)?;
            versions.extend([t, t]);
            let needs_labels = cfg.strategy == Strategy::Guided || cfg.sampler == SamplerKind::Cbs;
            let pls = (with_projector && needs_labels)
                .then(|| (pseudo_labels(f1.scores.view()), pseudo_labels(f2.scores.view())));
            let mut rng = rng_for(cfg.seed, &[SAMPLER_STREAM, t as u64, slot as u64]);
            let scene =
                unsupervised_scene(cfg, item, &f1, &f2, pls.as_ref(), state.bank.as_ref(), class_count, &mut rng)?;
            total += scene.value * inv_u;
            stats.merge(&scene.stats);
            bank_scenes += scene.used_bank as usize;
            if let (Some((g1, g2)), true) = (scene.grads, cfg.lambda > 0.0) {
                let s = cfg.lambda * inv_u;
                let acc = grad_u.get_or_insert_with(|| params.zeros_like());
                let (p1, _) = backward(params, &f1.acts, &scale_outputs(g1, s))?;
                let (p2, _) = backward(params, &f2.acts, &scale_outputs(g2, s))?;
                acc.add_scaled(1.0, &p1);
                acc.add_scaled(1.0, &p2);
            }
            if state.bank.is_some() {
                if let Some((pl1, pl2)) = pls {
                    bank_sources.push((f1.embeddings.expect("projector pass"), pl1));
                    bank_sources.push((f2.embeddings.expect("projector pass"), pl2));
                }
            }
        }
        check_finite("unsupervised loss", total, batch)?;
        loss_u = Some(total);
    }
    let unsup_grad_norm = grad_u.as_ref().map_or(0.0, |g| g.squared_norm().sqrt());
    if let Some(g) = &grad_u {
        grad.add_scaled(1.0, g);
    }
    if !grad.is_finite() {
        return Err(check_finite("gradient norm", f64::NAN, batch).unwrap_err());
    }

    let lr = learning_rate(cfg, t);
    apply_update(state, &grad, lr, cfg);

    if let Some(bank) = state.bank.as_mut() {
        let mut rng = rng_for(cfg.seed, &[BANK_STREAM, t as u64]);
        let views: Vec<_> = bank_sources.iter().map(|(e, pl)| (e.view(), pl)).collect();
        let min_conf = cfg.confidence_guidance.then_some(cfg.gamma);
        bank.update(&views, min_conf, &mut rng)?;
    }
    state.iteration += 1;
    Ok(StepReport {
        iteration: t,
        lr,
        loss_l,
        loss_u,
        loss: loss_l + cfg.lambda * loss_u.unwrap_or(0.0),
        stats,
        unsup_grad_norm,
        forward_versions: versions,
        skipped: batch.skipped,
        bank_negative_scenes: bank_scenes,
    })
}

fn apply_update(state: &mut TrainState, grad: &ModelParams, lr: f64, cfg: &TrainConfig) {
    let t = state.iteration as i32 + 1;
    let TrainState { params, optimizer, .. } = state;
    let decay = cfg.weight_decay;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad.tensors().into_iter().map(|(_, g, _)| g))
        .zip(optimizer.first.tensors_mut())
        .zip(optimizer.second.tensors_mut())
    {
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = if decay > 0.0 { g + decay * *p } else { g };
            match cfg.optimizer {
                OptimizerKind::SgdPoly => {
                    let step = if cfg.momentum > 0.0 {
                        *m = cfg.momentum * *m + g;
                        *m
                    } else {
                        g
                    };
                    *p -= lr * step;
                }
                OptimizerKind::AdamCosine => {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
                }
            }
        }
    }
}

/// Argmax predictions of every scene accumulated into one confusion matrix.
pub fn evaluate(params: &ModelParams, scenes: &SceneSet) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(params.config.class_count);
    for (k, scene) in scenes.scenes.iter().enumerate() {
        let labels = scene.labels().ok_or_else(|| Error::InvalidInput(format!("eval scene {k} has no labels")))?;
        let f = forward(params, scene, false)?;
        cm.accumulate(labels, &pseudo_labels(f.scores.view()).labels)?;
    }
    Ok(cm)
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_l: f64,
    pub loss_u: Option<f64>,
    pub gate_rate: Option<f64>,
    pub mask_rate: Option<f64>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
}

pub const LOG_HEADER: &str = "iter,lr,loss_l,loss_u,gate_rate,mask_rate,miou,macc";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.lr,
            self.loss_l,
            o(self.loss_u),
            o(self.gate_rate),
            o(self.mask_rate),
            o(self.miou),
            o(self.macc)
        )
    }
}

pub fn write_log<W: Write>(rows: &[LogRow], w: &mut W, header: bool) -> Result<()> {
    if header {
        writeln!(w, "{LOG_HEADER}")?;
    }
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Result of `train_run`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    /// Unlabeled scenes skipped over the run for lack of overlapping views.
    pub skipped: usize,
}

/// Initial state: fresh or `init_checkpoint` parameters.
pub fn initial_state(cfg: &TrainConfig, class_count: usize) -> Result<TrainState> {
    let model = cfg.model_config(class_count);
    let params = match &cfg.init_checkpoint {
        Some(path) => {
            let p = load_params(Path::new(path))?;
            if p.config.class_count != class_count || p.config.raw_feats != model.raw_feats {
                return Err(Error::Config("init_checkpoint does not fit this dataset".into()));
            }
            p
        }
        None => ModelParams::init(model, cfg.seed)?,
    };
    Ok(TrainState::new(params, cfg))
}

/// Runs steps from the state's iteration up to `stop_at` (default
/// `total_iters`), evaluating on the cadence and at the last step.
pub fn train_run(data: &TrainData, cfg: &TrainConfig, resume: Option<TrainState>, stop_at: Option<usize>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let class_count = data.labeled.class_count;
    if data.unlabeled.class_count != class_count {
        return Err(Error::InvalidInput("labeled and unlabeled sets disagree on class count".into()));
    }
    let mut state = match resume {
        Some(s) => s,
        None => initial_state(cfg, class_count)?,
    };
    let fixed = match (cfg.strategy, &cfg.pseudo_from) {
        (Strategy::SelfTraining, Some(path)) => {
            let teacher = load_params(Path::new(path))?;
            Some(fixed_pseudo_labels(&teacher, unlabeled_source(data))?)
        }
        _ => None,
    };
    let end = stop_at.unwrap_or(cfg.total_iters).min(cfg.total_iters);
    let mut log = Vec::new();
    let mut skipped = 0;
    while state.iteration < end {
        let batch = prepare_batch(state.iteration, data, fixed.as_deref(), cfg)?;
        let report = train_step(&mut state, &batch, cfg)?;
        skipped += report.skipped;
        let done = state.iteration;
        let due = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.total_iters;
        let metrics = match (&data.eval, due) {
            (Some(eval), true) => Some(evaluate(&state.params, eval)?),
            _ => None,
        };
        let guided = report.loss_u.is_some() && cfg.strategy == Strategy::Guided;
        log.push(LogRow {
            iter: report.iteration,
            lr: report.lr,
            loss_l: report.loss_l,
            loss_u: report.loss_u,
            gate_rate: guided.then(|| report.stats.gate_rate()),
            mask_rate: guided.then(|| report.stats.mask_rate()),
            miou: metrics.as_ref().map(ConfusionMatrix::miou),
            macc: metrics.as_ref().map(ConfusionMatrix::macc),
        });
    }
    Ok(TrainOutcome { state, log, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_midpoint() {
        let cfg = TrainConfig { lr: 0.2, total_iters: 1000, ..TrainConfig::default() };
        let lr = learning_rate(&cfg, 500);
        assert!((lr - 0.2 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((lr - 0.107177).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { optimizer: OptimizerKind::AdamCosine, lr: 0.01, total_iters: 100, ..TrainConfig::default() };
        assert_eq!(learning_rate(&cfg, 0), 0.01);
        assert!((learning_rate(&cfg, 50) - 0.005).abs() < 1e-15);
        assert!(learning_rate(&cfg, 100).abs() < 1e-15);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig { strategy: Strategy::PointInfonce, init_checkpoint: Some("a.bin".into()), ..Default::default() };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(TrainConfig::from_toml_str("strategy = \"guided\"\nlambda = -1.0\n").is_err());
        assert!(TrainConfig::from_toml_str("warmup_iters = 10\ntotal_iters = 5\n").is_err());
        assert!(TrainConfig::from_toml_str("strategy = \"self_training\"\n").is_err());
        assert!(TrainConfig::from_toml_str("not_a_key = 1\n").is_err());
        let partial = TrainConfig::from_toml_str("sampler = \"random\"\nk_pos = 64\n").unwrap();
        assert_eq!(partial.sampler, SamplerKind::Random);
        assert_eq!(partial.k_pos, 64);
        assert_eq!(partial.lambda, 0.1);
    }

    #[test]
    fn names_parse() {
        assert_eq!("sup_only".parse::<Strategy>().unwrap(), Strategy::SupOnly);
        assert_eq!("cbs".parse::<SamplerKind>().unwrap(), SamplerKind::Cbs);
        assert_eq!("adam_cosine".parse::<OptimizerKind>().unwrap(), OptimizerKind::AdamCosine);
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn scene_order_covers_each_epoch() {
        let mut seen: Vec<usize> = (0..7).map(|s| scene_index(3, 1, 7, 2, s / 2, s % 2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }
}
