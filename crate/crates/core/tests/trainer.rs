use gpcl_core::synth::{gen_scene, SynthConfig};
use gpcl_core::trainer::*;
use gpcl_core::{Error, SceneSet};
use tempfile::TempDir;

fn data() -> TrainData {
    let syn = SynthConfig { points_per_scene: (400, 500), ..SynthConfig::indoor() };
    let set = |first: u64, n: u64, labels: bool| {
        let clouds = (first..first + n)
            .map(|s| {
                let c = gen_scene(&syn, s).unwrap();
                if labels { c } else { c.without_labels() }
            })
            .collect();
        SceneSet::new(clouds, (0..n as u32).collect(), syn.class_count).unwrap()
    };
    TrainData { labeled: set(0, 2, true), unlabeled: set(2, 3, false), eval: Some(set(100, 1, true)) }
}

fn config(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        total_iters: 6,
        warmup_iters: 1,
        eval_every: 3,
        labeled_batch: 2,
        unlabeled_batch: 2,
        k_pos: 64,
        k_neg: 64,
        bank_capacity: 32,
        min_overlap_points: 32,
        hidden: 16,
        feat_dim: 8,
        proj_hidden: 8,
        embed_dim: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn state_round_trips_through_a_file() {
    let dir = TempDir::new().unwrap();
    let out = train_run(&data(), &config(Strategy::Guided), None, Some(4)).unwrap();
    assert!(out.state.bank.as_ref().is_some_and(|b| b.population() > 0));
    let path = dir.path().join("state.bin");
    out.state.save(&path).unwrap();
    assert_eq!(TrainState::load(&path).unwrap(), out.state);

    let params = dir.path().join("model.bin");
    save_params(&out.state.params, &params).unwrap();
    assert_eq!(load_params(&params).unwrap(), out.state.params);
}

#[test]
fn truncated_state_file_is_a_format_error() {
    let dir = TempDir::new().unwrap();
    let out = train_run(&data(), &config(Strategy::SupOnly), None, Some(1)).unwrap();
    let path = dir.path().join("state.bin");
    out.state.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(TrainState::load(&path).is_err());
    std::fs::write(&path, b"not a state").unwrap();
    assert!(TrainState::load(&path).is_err());
}

#[test]
fn config_file_loads_with_defaults_for_missing_keys() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "strategy = \"point_infonce\"\nsampler = \"random\"\ntau = 0.07\n").unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.strategy, Strategy::PointInfonce);
    assert_eq!(cfg.tau, 0.07);
    assert_eq!(cfg.k_pos, TrainConfig::default().k_pos);
}

#[test]
fn self_training_runs_from_a_saved_teacher() {
    let dir = TempDir::new().unwrap();
    let d = data();
    let teacher = train_run(&d, &config(Strategy::SupOnly), None, None).unwrap();
    let path = dir.path().join("teacher.bin");
    save_params(&teacher.state.params, &path).unwrap();
    let cfg = TrainConfig { pseudo_from: Some(path.to_string_lossy().into_owned()), ..config(Strategy::SelfTraining) };
    let out = train_run(&d, &cfg, None, None).unwrap();
    assert_eq!(out.state.iteration, 6);
    assert!(out.log[1..].iter().all(|r| r.loss_u.is_some_and(f64::is_finite)));
    assert!(out.log[0].loss_u.is_none());
}

#[test]
fn every_strategy_logs_eval_on_the_cadence() {
    for strategy in [Strategy::SupOnly, Strategy::Mse, Strategy::Cosine, Strategy::PointInfonce, Strategy::Guided] {
        let out = train_run(&data(), &config(strategy), None, None).unwrap();
        let evaluated: Vec<usize> = out.log.iter().filter(|r| r.miou.is_some()).map(|r| r.iter).collect();
        assert_eq!(evaluated, vec![2, 5], "{strategy:?}");
        assert!(out.log.iter().all(|r| r.loss_l.is_finite()));
    }
}

#[test]
fn exploding_learning_rate_is_a_numerical_error() {
    let cfg = TrainConfig { lr: 1e200, ..config(Strategy::SupOnly) };
    match train_run(&data(), &cfg, None, None) {
        Err(e @ Error::NonFinite(_)) => assert!(e.is_numerical()),
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.state.iteration)),
    }
}

#[test]
fn full_ratio_draws_unlabeled_views_from_labeled_scenes() {
    let mut d = data();
    d.unlabeled = SceneSet::empty(d.labeled.class_count);
    for pairing in [FullRatioPairing::Independent, FullRatioPairing::SameScene] {
        let cfg = TrainConfig { full_ratio_pairing: pairing, ..config(Strategy::PointInfonce) };
        let batch = prepare_batch(3, &d, None, &cfg).unwrap();
        assert_eq!(batch.unlabeled.len() + batch.skipped, cfg.unlabeled_batch);
        let out = train_run(&d, &cfg, None, None).unwrap();
        assert!(out.log[1..].iter().all(|r| r.loss_u.is_some()), "{pairing:?}");
    }
}

#[test]
fn same_scene_pairing_reuses_the_labeled_slot_scene() {
    let mut d = data();
    let independent = config(Strategy::Mse);
    let same = TrainConfig { full_ratio_pairing: FullRatioPairing::SameScene, ..config(Strategy::Mse) };
    // with unlabeled scenes present the pairing option has no effect
    for it in 0..20 {
        for slot in 0..4 {
            assert_eq!(unlabeled_scene_index(&d, &same, it, slot), unlabeled_scene_index(&d, &independent, it, slot));
        }
    }
    d.unlabeled = SceneSet::empty(d.labeled.class_count);
    let mut differs = false;
    for it in 0..20 {
        for slot in 0..4 {
            let l = labeled_scene_index(&d, &same, it, slot % same.labeled_batch);
            assert_eq!(unlabeled_scene_index(&d, &same, it, slot), l);
            differs |= unlabeled_scene_index(&d, &independent, it, slot) != l;
        }
    }
    assert!(differs);
}
