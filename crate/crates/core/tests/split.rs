use gpcl_core::split::{labeled_target, split_dataset, SplitSpec, STANDARD_RATIOS};
use gpcl_core::synth::{gen_scene, SynthConfig};
use gpcl_core::SceneSet;

fn scenes(first: u64, n: u64) -> SceneSet {
    let syn = SynthConfig { points_per_scene: (200, 300), ..SynthConfig::indoor() };
    let clouds = (first..first + n).map(|s| gen_scene(&syn, s).unwrap()).collect();
    SceneSet::new(clouds, (0..n as u32).map(|g| g / 2).collect(), syn.class_count).unwrap()
}

#[test]
fn standard_ratios_label_the_expected_share() {
    let set = scenes(0, 20);
    for ratio in STANDARD_RATIOS {
        let (l, u) = split_dataset(&set, &SplitSpec::new(ratio, false, 3)).unwrap();
        assert_eq!(l.len(), labeled_target(20, ratio));
        assert_eq!(l.len() + u.len(), 20);
        assert!(l.scenes.iter().all(|s| s.labels().is_some()));
        assert!(u.scenes.iter().all(|s| s.labels().is_none()));
    }
}

#[test]
fn transductive_scenes_join_the_unlabeled_side_without_labels() {
    let set = scenes(0, 10);
    let extra = scenes(100_000, 3);
    let mut spec = SplitSpec::new(0.2, true, 1);
    spec.transductive_extra = Some(extra.clone());
    let (l, u) = split_dataset(&set, &spec).unwrap();
    assert_eq!(l.len(), 2);
    assert_eq!(u.len(), 8 + 3);
    for (got, want) in u.scenes[8..].iter().zip(&extra.scenes) {
        assert_eq!(got.coords(), want.coords());
        assert!(got.labels().is_none());
    }
}

#[test]
fn mismatched_transductive_class_count_is_rejected() {
    let set = scenes(0, 4);
    let mut spec = SplitSpec::new(0.5, false, 0);
    spec.transductive_extra = Some(SceneSet::empty(3));
    assert!(split_dataset(&set, &spec).is_err());
}
