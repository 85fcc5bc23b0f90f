use std::collections::BTreeSet;

use auxft::eval::synth::{synth_generate, SynthConfig};
use auxft::eval::{
    iou, map50_95, retrieval_accuracy, run_episode, run_episodes, sample_episodes, Episode,
    EvalData, ImageEval, MetricSummary, SupportItem,
};
use auxft::fsl::FslConfig;
use auxft::pipeline::{
    eval_data, evaluate, feature_maps, EvalOptions, FeatureSource, WeightsChoice,
};
use auxft::tensor_store::{DatasetManifest, Detection};
use auxft::Error;
use proptest::prelude::*;

fn fine_set(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn boxed(x0: f64, y0: f64, w: f64, h: f64, fine: &str, conf: f64) -> Detection {
    Detection::new(x0, y0, x0 + w, y0 + h, "obj", conf).with_fine(fine)
}

fn image_strategy() -> impl Strategy<Value = ImageEval> {
    let det = (
        0.0f64..40.0,
        0.0f64..40.0,
        1.0f64..20.0,
        1.0f64..20.0,
        0usize..2,
        0.0f64..1.0,
    );
    (
        prop::collection::vec(det.clone(), 0..5),
        prop::collection::vec(det, 1..4),
    )
        .prop_map(|(p, g)| {
            let names = ["a", "b"];
            ImageEval {
                predictions: p
                    .into_iter()
                    .map(|(x, y, w, h, k, c)| boxed(x, y, w, h, names[k], c))
                    .collect(),
                ground_truth: g
                    .into_iter()
                    .map(|(x, y, w, h, k, _)| boxed(x, y, w, h, names[k], 1.0))
                    .collect(),
            }
        })
}

fn shifted(images: &[ImageEval], dx: f64, dy: f64) -> Vec<ImageEval> {
    let mv = |d: &Detection| {
        let mut d = d.clone();
        d.x0 += dx;
        d.x1 += dx;
        d.y0 += dy;
        d.y1 += dy;
        d
    };
    images
        .iter()
        .map(|im| ImageEval {
            predictions: im.predictions.iter().map(mv).collect(),
            ground_truth: im.ground_truth.iter().map(mv).collect(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(96) })]

    #[test]
    fn map_is_bounded_and_monotone_in_threshold(images in prop::collection::vec(image_strategy(), 1..4)) {
        let r = map50_95(&images, &fine_set(&["a", "b"])).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.map));
        for w in r.per_threshold.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        let acc = retrieval_accuracy(&images);
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn metrics_ignore_a_common_translation(images in prop::collection::vec(image_strategy(), 1..4), dx in -8.0f64..8.0, dy in -8.0f64..8.0) {
        // Integer offsets keep the IoU arithmetic exact.
        let (dx, dy) = (dx.round(), dy.round());
        let a = map50_95(&images, &fine_set(&["a", "b"])).unwrap();
        let moved = shifted(&images, dx, dy);
        let b = map50_95(&moved, &fine_set(&["a", "b"])).unwrap();
        for (x, y) in a.per_threshold.iter().zip(b.per_threshold) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!((retrieval_accuracy(&images) - retrieval_accuracy(&moved)).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in (0.0f64..30.0, 0.0f64..30.0, 0.5f64..10.0, 0.5f64..10.0), b in (0.0f64..30.0, 0.0f64..30.0, 0.5f64..10.0, 0.5f64..10.0)) {
        let p = boxed(a.0, a.1, a.2, a.3, "a", 1.0);
        let q = boxed(b.0, b.1, b.2, b.3, "a", 1.0);
        let v = iou(&p, &q);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&q, &p));
        prop_assert!((iou(&p, &p) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn perfect_predictions_score_one() {
    let gt = vec![
        boxed(0.0, 0.0, 10.0, 10.0, "a", 1.0),
        boxed(20.0, 20.0, 5.0, 5.0, "b", 1.0),
    ];
    let images = vec![ImageEval {
        predictions: gt.clone(),
        ground_truth: gt,
    }];
    let r = map50_95(&images, &fine_set(&["a", "b"])).unwrap();
    assert_eq!(r.map, 1.0);
    assert_eq!(retrieval_accuracy(&images), 1.0);
}

#[test]
fn unknown_fine_label_is_rejected() {
    let images = vec![ImageEval {
        predictions: vec![boxed(0.0, 0.0, 1.0, 1.0, "zebra", 0.5)],
        ground_truth: vec![boxed(0.0, 0.0, 1.0, 1.0, "a", 1.0)],
    }];
    assert!(matches!(
        map50_95(&images, &fine_set(&["a"])),
        Err(Error::Label(_))
    ));
}

fn synth(dir: &std::path::Path, cfg: SynthConfig) -> DatasetManifest {
    synth_generate(&cfg, dir).unwrap()
}

fn data_for(m: &DatasetManifest, source: FeatureSource) -> EvalData {
    eval_data(
        m,
        feature_maps(m, None, source, WeightsChoice::Ema).unwrap(),
    )
    .unwrap()
}

#[test]
fn one_shot_support_covers_every_fine_class_once() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(
        dir.path(),
        SynthConfig {
            num_coarse: 13,
            fine_per_coarse: 3,
            samples_per_fine: 1,
            ..Default::default()
        },
    );
    assert_eq!(m.taxonomy.num_coarse(), 13);
    assert_eq!(m.taxonomy.num_fine(), 39);
    for ep in sample_episodes(&m, 1, 3, 7).unwrap() {
        assert_eq!(ep.support.len(), 39);
        let fines: BTreeSet<_> = ep
            .support
            .iter()
            .map(|s| s.annotation.fine_class.clone().unwrap())
            .collect();
        assert_eq!(fines.len(), 39);
        assert!(ep.query.is_empty());
    }
}

fn collapsed() -> SynthConfig {
    SynthConfig {
        sigma_c: 0.0,
        nuisance: 0.0,
        cell_noise: 0.0,
        det_jitter: 0.0,
        ..Default::default()
    }
}

fn options(source: FeatureSource) -> EvalOptions {
    EvalOptions {
        episodes: 20,
        source,
        ..Default::default()
    }
}

#[test]
fn indistinguishable_features_give_chance_retrieval() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), collapsed());
    let out = evaluate(&m, None, &options(FeatureSource::Raw(0))).unwrap();
    for e in &out.summary.episodes {
        assert!((e.retrieval - 1.0 / 3.0).abs() < 1e-12, "{}", e.retrieval);
    }
}

#[test]
fn separable_oracle_retrieves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), collapsed());
    let out = evaluate(&m, None, &options(FeatureSource::Oracle)).unwrap();
    assert_eq!(out.summary.retrieval.mean, 1.0);
}

#[test]
fn zero_margin_oracle_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(
        dir.path(),
        SynthConfig {
            margin: 0.0,
            ..collapsed()
        },
    );
    let out = evaluate(&m, None, &options(FeatureSource::Oracle)).unwrap();
    assert!((out.summary.retrieval.mean - 1.0 / 3.0).abs() < 1e-12);
}

/// Every 1-shot episode of the manifest, one support annotation per fine class.
fn all_one_shot_episodes(m: &DatasetManifest) -> Vec<Episode> {
    let mut per_class: Vec<Vec<SupportItem>> = Vec::new();
    for fine in m.taxonomy.fine_classes() {
        per_class.push(
            m.images
                .iter()
                .flat_map(|r| {
                    r.ground_truth
                        .iter()
                        .filter(|g| g.fine_class.as_deref() == Some(fine))
                        .map(|g| SupportItem {
                            image_id: r.id.clone(),
                            annotation: g.clone(),
                        })
                })
                .collect(),
        );
    }
    let mut out: Vec<Vec<SupportItem>> = vec![Vec::new()];
    for items in &per_class {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                items.iter().map(move |it| {
                    let mut p = prefix.clone();
                    p.push(it.clone());
                    p
                })
            })
            .collect();
    }
    out.into_iter()
        .map(|support| {
            let used: BTreeSet<&str> = support.iter().map(|s| s.image_id.as_str()).collect();
            let query = m
                .images
                .iter()
                .filter(|r| !used.contains(r.id.as_str()))
                .map(|r| r.id.clone())
                .collect();
            Episode {
                shots: 1,
                support,
                query,
            }
        })
        .collect()
}

#[test]
fn sampled_mean_agrees_with_exhaustive_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(
        dir.path(),
        SynthConfig {
            num_coarse: 1,
            fine_per_coarse: 3,
            samples_per_fine: 4,
            sigma_c: 0.3,
            nuisance: 0.5,
            ..Default::default()
        },
    );
    let data = data_for(&m, FeatureSource::Raw(0));
    let cfg = FslConfig::default();
    let all = all_one_shot_episodes(&m);
    assert_eq!(all.len(), 64);
    let exact: Vec<f64> = all
        .iter()
        .map(|e| run_episode(0, e, &data, &cfg).unwrap().retrieval)
        .collect();
    let exact_mean = exact.iter().sum::<f64>() / exact.len() as f64;
    let sd =
        (exact.iter().map(|v| (v - exact_mean).powi(2)).sum::<f64>() / exact.len() as f64).sqrt();

    assert!(sd > 0.0, "episodes should not all score alike");

    let sampled = sample_episodes(&m, 1, 100, 3).unwrap();
    let mc = run_episodes(&sampled, &data, &cfg, 1)
        .unwrap()
        .retrieval
        .mean;
    let se = sd / 10.0;
    assert!(
        (mc - exact_mean).abs() <= 3.0 * se + 1e-12,
        "mc {mc} exact {exact_mean} se {se}"
    );
}

#[test]
fn evaluation_is_deterministic_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), SynthConfig::default());
    let a = evaluate(&m, None, &options(FeatureSource::Raw(1))).unwrap();
    let b = evaluate(&m, None, &options(FeatureSource::Raw(1))).unwrap();
    let c = evaluate(
        &m,
        None,
        &EvalOptions {
            threads: 3,
            ..options(FeatureSource::Raw(1))
        },
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.summary.results_csv(), c.summary.results_csv());
    let other = evaluate(
        &m,
        None,
        &EvalOptions {
            seed: 9,
            ..options(FeatureSource::Raw(1))
        },
    )
    .unwrap();
    assert_ne!(
        sample_episodes(&m, 1, 20, 0).unwrap(),
        sample_episodes(&m, 1, 20, 9).unwrap()
    );
    assert_eq!(other.summary.episodes.len(), 20);
}

#[test]
fn exhausted_classes_raise_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), SynthConfig::default());
    let out = evaluate(
        &m,
        None,
        &EvalOptions {
            shots: 5,
            episodes: 2,
            source: FeatureSource::Raw(0),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.warnings.len(), 9);
    assert!(out.warnings[0].contains("no query samples"));
    let quiet = evaluate(&m, None, &options(FeatureSource::Raw(0))).unwrap();
    assert!(quiet.warnings.is_empty());
}

#[test]
fn summary_statistics_of_degenerate_runs() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), SynthConfig::default());
    let data = data_for(&m, FeatureSource::Raw(0));
    let eps = sample_episodes(&m, 1, 1, 4).unwrap();
    let one = run_episodes(&eps, &data, &FslConfig::default(), 1).unwrap();
    assert!(!one.map.std_defined);
    assert!(one.summary_text().contains("single episode"));
    let repeated = vec![eps[0].clone(); 4];
    let rep = run_episodes(&repeated, &data, &FslConfig::default(), 2).unwrap();
    assert!(rep.map.std_defined);
    assert_eq!(rep.map.std, 0.0);
    assert_eq!(rep.retrieval.std, 0.0);
    assert_eq!(MetricSummary::of(&[0.25, 0.75]).mean, 0.5);
}

#[test]
fn summary_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), SynthConfig::default());
    let out = evaluate(&m, None, &options(FeatureSource::Raw(0))).unwrap();
    let res = tempfile::tempdir().unwrap();
    out.summary.save(res.path()).unwrap();
    let csv = std::fs::read_to_string(res.path().join("results.csv")).unwrap();
    assert!(csv.starts_with("episode,map50_95,map50,map55,"));
    assert_eq!(csv.lines().count(), 21);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(res.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(json["episodes"], 20);
}

#[test]
fn episode_parameters_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), SynthConfig::default());
    assert!(matches!(
        sample_episodes(&m, 0, 1, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        sample_episodes(&m, 1, 0, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        feature_maps(&m, None, FeatureSource::Aux(0), WeightsChoice::Ema),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        feature_maps(&m, None, FeatureSource::Raw(5), WeightsChoice::Ema),
        Err(Error::Config(_))
    ));
}
