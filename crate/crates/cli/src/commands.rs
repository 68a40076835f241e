use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gpcl_core::losses::pseudo_labels;
use gpcl_core::metrics::ConfusionMatrix;
use gpcl_core::model::forward;
use gpcl_core::scene_io::{load_scene, save_scene};
use gpcl_core::split::plan_split;
use gpcl_core::synth::{gen_scene, SynthConfig};
use gpcl_core::trainer::{evaluate, load_params, save_params, train_run, write_log, TrainConfig, TrainData, TrainState};
use gpcl_core::IGNORE;

use crate::error::{CliError, CliResult};
use crate::manifest::{
    load_set, read_json, write_json, DatasetManifest, RunRecorder, SceneEntry, SplitManifest,
};
use crate::{EmbedArgs, EvalArgs, GenDataArgs, SplitArgs, TrainArgs};

pub const DATASET_FILE: &str = "dataset.json";
pub const SPLIT_FILE: &str = "split.json";
pub const MODEL_FILE: &str = "model.bin";
pub const STATE_FILE: &str = "state.bin";
pub const LOG_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

pub fn gen_data(a: &GenDataArgs, argv: &[String]) -> CliResult<()> {
    if a.scenes == 0 {
        return Err(CliError::Usage("--scenes must be at least 1".into()));
    }
    if a.group_size == 0 {
        return Err(CliError::Usage("--group-size must be at least 1".into()));
    }
    let mut syn = SynthConfig::for_preset(a.preset);
    syn.seed = a.seed;
    if let Some(f) = a.rare_fraction {
        syn.rare_class_fraction = f;
    }
    syn.validate()?;
    create_dir(&a.out)?;
    let mut rec = RunRecorder::new("gen-data", argv);
    rec.config = to_json(&syn);
    rec.seeds = vec![a.seed, a.first_scene];

    let mut histogram = vec![0u64; syn.class_count];
    let mut entries = Vec::with_capacity(a.scenes);
    for k in 0..a.scenes {
        let cloud = gen_scene(&syn, a.first_scene + k as u64)?;
        for &l in cloud.labels().unwrap_or(&[]) {
            histogram[l as usize] += 1;
        }
        let name = PathBuf::from(format!("scene_{k:05}.gpcl"));
        let path = a.out.join(&name);
        save_scene(&cloud, syn.class_count, &path)?;
        rec.output(&path);
        entries.push(SceneEntry { path: name, group_id: (k / a.group_size) as u32 });
    }
    let manifest = DatasetManifest {
        class_count: syn.class_count,
        synth: syn,
        first_scene: a.first_scene,
        scenes: entries,
    };
    let path = a.out.join(DATASET_FILE);
    write_json(&manifest, &path)?;
    rec.output(&path);

    let total: u64 = histogram.iter().sum();
    println!("wrote {} scenes, {total} points", a.scenes);
    println!("class,points,share");
    for (c, n) in histogram.iter().enumerate() {
        println!("{c},{n},{:.6}", *n as f64 / total.max(1) as f64);
    }
    rec.finish(&a.out)
}

pub fn split(a: &SplitArgs, argv: &[String]) -> CliResult<()> {
    if !(a.ratio > 0.0 && a.ratio <= 1.0) {
        return Err(CliError::Usage(format!("--ratio must lie in (0, 1], got {}", a.ratio)));
    }
    let data: DatasetManifest = read_json(&a.data)?;
    let scenes = data.resolved(&a.data)?;
    let groups: Vec<u32> = scenes.iter().map(|e| e.group_id).collect();
    let plan = plan_split(&groups, a.ratio, a.sequence_aware, a.seed)?;
    let mut rec = RunRecorder::new("split", argv);
    rec.seeds = vec![a.seed];
    rec.input(&a.data);

    let labeled: Vec<SceneEntry> = plan.labeled.iter().map(|&i| scenes[i].clone()).collect();
    let mut unlabeled: Vec<SceneEntry> = plan.unlabeled.iter().map(|&i| scenes[i].clone()).collect();
    if let Some(extra_path) = &a.transductive {
        let extra: DatasetManifest = read_json(extra_path)?;
        if extra.class_count != data.class_count {
            return Err(CliError::Data("transductive scenes use a different class count".into()));
        }
        rec.input(extra_path);
        unlabeled.extend(extra.resolved(extra_path)?);
    }
    let manifest = SplitManifest {
        class_count: data.class_count,
        labeled_ratio: a.ratio,
        sequence_aware: a.sequence_aware,
        seed: a.seed,
        cut_group: plan.cut_group,
        labeled,
        unlabeled,
    };
    rec.config = to_json(&manifest);
    create_dir(&a.out)?;
    let path = a.out.join(SPLIT_FILE);
    write_json(&manifest, &path)?;
    rec.output(&path);
    println!("labeled {} scenes, unlabeled {} scenes", manifest.labeled.len(), manifest.unlabeled.len());
    rec.finish(&a.out)
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = a.sampler {
        cfg.sampler = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.total_iters {
        cfg.total_iters = v;
        cfg.warmup_iters = cfg.warmup_iters.min(v);
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(p) = &a.pseudo_from {
        cfg.pseudo_from = Some(p.to_string_lossy().into_owned());
    }
    if let Some(p) = &a.init_checkpoint {
        cfg.init_checkpoint = Some(p.to_string_lossy().into_owned());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let cfg = train_config(a)?;
    let split: SplitManifest = read_json(&a.split)?;
    let mut rec = RunRecorder::new("train", argv);
    rec.config = to_json(&cfg);
    rec.seeds = vec![cfg.seed];
    rec.input(&a.split);
    for p in [&cfg.pseudo_from, &cfg.init_checkpoint].into_iter().flatten() {
        rec.input(Path::new(p));
    }
    let labeled = load_set(&split.labeled, split.class_count, false)?;
    let unlabeled = load_set(&split.unlabeled, split.class_count, true)?;
    let eval = match &a.eval {
        Some(path) => {
            let m: DatasetManifest = read_json(path)?;
            rec.input(path);
            Some(load_set(&m.resolved(path)?, m.class_count, false)?)
        }
        None => None,
    };
    let data = TrainData { labeled, unlabeled, eval };

    create_dir(&a.out)?;
    let state_path = a.out.join(STATE_FILE);
    let log_path = a.out.join(LOG_FILE);
    let resume = if a.resume {
        rec.input(&state_path);
        Some(TrainState::load(&state_path)?)
    } else {
        None
    };
    let outcome = train_run(&data, &cfg, resume, a.stop_at)?;

    let config_path = a.out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml_string()?).map_err(|e| CliError::io(&config_path, e))?;
    outcome.state.save(&state_path)?;
    let model_path = a.out.join(MODEL_FILE);
    save_params(&outcome.state.params, &model_path)?;
    let fresh_log = !a.resume || !log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut w = BufWriter::new(file);
    write_log(&outcome.log, &mut w, fresh_log)?;
    w.flush().map_err(|e| CliError::io(&log_path, e))?;
    drop(w);
    for p in [&config_path, &state_path, &model_path, &log_path] {
        rec.output(p);
    }

    let last = outcome.log.iter().rev().find(|r| r.miou.is_some());
    print!("iteration {} of {}", outcome.state.iteration, cfg.total_iters);
    if let Some(r) = last {
        print!(", mIoU {:.4} at iteration {}", r.miou.unwrap_or(0.0), r.iter + 1);
    }
    println!(", skipped unlabeled scenes {}", outcome.skipped);
    rec.finish(&a.out)
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> CliResult<()> {
    let data: DatasetManifest = read_json(&a.data)?;
    let truth = load_set(&data.resolved(&a.data)?, data.class_count, false)?;
    let mut rec = RunRecorder::new("eval", argv);
    rec.input(&a.data);
    let cm = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            rec.input(ckpt);
            let params = load_params(ckpt)?;
            if params.config.class_count != data.class_count {
                return Err(CliError::Data("checkpoint class count does not match the dataset".into()));
            }
            evaluate(&params, &truth)?
        }
        (None, Some(pred_path)) => {
            rec.input(pred_path);
            let pm: DatasetManifest = read_json(pred_path)?;
            let preds = load_set(&pm.resolved(pred_path)?, data.class_count, false)?;
            prediction_matrix(&truth, &preds)?
        }
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --predictions".into())),
    };
    let summary = cm.summary();
    create_dir(&a.out)?;
    let metrics_path = a.out.join("metrics.json");
    write_json(
        &serde_json::json!({
            "miou": summary.miou,
            "macc": summary.macc,
            "class_iou": summary.class_iou,
            "points": cm.total(),
        }),
        &metrics_path,
    )?;
    let csv_path = a.out.join("class_iou.csv");
    let mut w = BufWriter::new(File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?);
    cm.write_class_csv(&mut w)?;
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    drop(w);
    rec.output(&metrics_path);
    rec.output(&csv_path);
    println!("mIoU {:.6} mAcc {:.6} over {} points", summary.miou, summary.macc, cm.total());
    rec.finish(&a.out)
}

/// Confusion matrix of stored prediction labels against ground truth, scene by scene.
fn prediction_matrix(truth: &gpcl_core::SceneSet, preds: &gpcl_core::SceneSet) -> CliResult<ConfusionMatrix> {
    if truth.len() != preds.len() {
        return Err(CliError::Data(format!("{} scenes but {} predictions", truth.len(), preds.len())));
    }
    let mut cm = ConfusionMatrix::new(truth.class_count);
    for (k, (t, p)) in truth.scenes.iter().zip(&preds.scenes).enumerate() {
        let labels = t.labels().ok_or_else(|| CliError::Data(format!("scene {k} has no labels")))?;
        let pred = p.labels().ok_or_else(|| CliError::Data(format!("prediction {k} has no labels")))?;
        if pred.len() != labels.len() || pred.iter().any(|&c| c < 0) {
            return Err(CliError::Data(format!("prediction {k} does not cover every point")));
        }
        let pred: Vec<usize> = pred.iter().map(|&c| c as usize).collect();
        cm.accumulate(labels, &pred)?;
    }
    Ok(cm)
}

pub fn embed(a: &EmbedArgs, argv: &[String]) -> CliResult<()> {
    let params = load_params(&a.checkpoint)?;
    let (cloud, class_count) = load_scene(&a.scene)?;
    if class_count != params.config.class_count {
        return Err(CliError::Data("scene class count does not match the checkpoint".into()));
    }
    let mut rec = RunRecorder::new("embed", argv);
    rec.input(&a.checkpoint);
    rec.input(&a.scene);
    let f = forward(&params, &cloud, true)?;
    let emb = f.embeddings.ok_or_else(|| CliError::Data("model produced no embeddings".into()))?;
    let pl = pseudo_labels(f.scores.view());

    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    let mut w = BufWriter::new(File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?);
    let write_err = |e| CliError::io(&a.out, e);
    let header: Vec<String> = (0..emb.ncols()).map(|k| format!("e_{k}")).collect();
    writeln!(w, "origin_id,class,pseudo_class,confidence,{}", header.join(",")).map_err(write_err)?;
    for i in 0..cloud.len() {
        let class = cloud.labels().map_or(IGNORE, |l| l[i]);
        let row: Vec<String> = emb.row(i).iter().map(f64::to_string).collect();
        writeln!(
            w,
            "{},{class},{},{},{}",
            cloud.origin_ids()[i],
            pl.labels[i],
            pl.confidences[i],
            row.join(",")
        )
        .map_err(write_err)?;
    }
    w.flush().map_err(write_err)?;
    drop(w);
    rec.output(&a.out);
    println!("wrote {} embeddings of dimension {}", cloud.len(), emb.ncols());
    rec.finish(dir)
}
