//! Operation-level behaviour: model identities, training, prediction,
//! checkpoints and the end-to-end pipeline on small scenes.

mod common;

use common::{random_tensor, rng, small_pair};
use gksnet::checkpoint::Checkpoint;
use gksnet::error::GksError;
use gksnet::eval::{predict_change_map, Metrics, PredictMode};
use gksnet::kernels::BnMode;
use gksnet::model::{self, names, Bound, Fusion, ModelConfig};
use gksnet::pipeline::{self, run_ablation, run_combination_matrix, run_pipeline, PipelineConfig, Variant};
use gksnet::preclass::{
    hierarchical_preclassify, log_ratio_di, DifferenceImage, ImagePair, PatchExtractor, PixelClass, PreclassMap,
};
use gksnet::train::{build_support_set, train, train_step, PatchDataset, TrainConfig};
use gksnet::{Image, Mask, Tape};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        r: 3,
        width: 4,
        c: 6,
        d: 3,
        n_layers: 2,
        hidden: 5,
        ..Default::default()
    }
}

fn tiny_pipeline(epochs: usize) -> PipelineConfig {
    PipelineConfig {
        model: tiny_model(),
        train: TrainConfig {
            epochs,
            base_lr: 1e-3,
            batch_size: 8,
            support_size: 8,
            ..Default::default()
        },
        sample_ratio: 0.05,
        ..Default::default()
    }
}

#[test]
fn zero_reprojection_leaves_features_unchanged() {
    let cfg = tiny_model();
    let params = model::model_init(&cfg, 1).unwrap();
    let mut r = rng(2);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &params);
    let mut buffers = params.buffers.clone();
    let xt = tape.constant(random_tensor(&mut r, &[3, 3, 3, 3]));
    let xs = tape.constant(random_tensor(&mut r, &[3, 3, 3, 3]));
    let ft = model::backbone_forward(&mut tape, &bound, &mut buffers, xt, BnMode::Train).unwrap();
    let fs = model::backbone_forward(&mut tape, &bound, &mut buffers, xs, BnMode::Train).unwrap();
    let e = model::enhance_features(&mut tape, &bound, &cfg, ft, Some(fs)).unwrap();
    assert_eq!(tape.value(e.target), tape.value(ft));
}

#[test]
fn no_fusion_target_ignores_source() {
    let cfg = ModelConfig { fusion: Fusion::None, ..tiny_model() };
    let mut params = model::model_init(&cfg, 3).unwrap();
    let mut r = rng(4);
    for t in params.trainable.values_mut() {
        *t = t.map(|v| v + 0.05);
    }
    let target = random_tensor(&mut r, &[4, 3, 3, 3]);
    let logits = |source| {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &params);
        let mut buffers = params.buffers.clone();
        let t = tape.constant(target.clone());
        let s = tape.constant(source);
        let out = model::forward(&mut tape, &bound, &mut buffers, &cfg, t, Some(s), BnMode::Train).unwrap();
        tape.value(out.target_logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let a = logits(random_tensor(&mut r, &[4, 3, 3, 3]));
    let b = logits(random_tensor(&mut r, &[4, 3, 3, 3]).map(|v| 5.0 * v));
    assert_eq!(a, b);
}

#[test]
fn zero_weight_no_fusion_freezes_source_parameters() {
    let cfg = ModelConfig { fusion: Fusion::None, ..tiny_model() };
    let mut params = model::model_init(&cfg, 5).unwrap();
    let mut r = rng(6);
    let t = random_tensor(&mut r, &[4, 3, 3, 3]);
    let s = random_tensor(&mut r, &[4, 3, 3, 3]);
    let step = train_step(&mut params, &cfg, (t, &[0, 1, 1, 0]), Some((s, &[1, 0, 0, 1])), 0.0).unwrap();
    let source_only = model::source_only_names(&cfg);
    assert!(!source_only.is_empty());
    for name in &source_only {
        assert!(step.grads[name].data().iter().all(|&g| g == 0.0), "{name}");
    }
    assert!(step.grads[names::FC2_W].data().iter().any(|&g| g != 0.0));
}

#[test]
fn basic_variant_has_no_graph_parameters() {
    let cfg = Variant::Basic.apply(&tiny_model());
    let params = model::model_init(&cfg, 0).unwrap();
    assert!(!params.has_graph());
    assert!(params.trainable.keys().all(|k| !k.starts_with("graph")));
}

fn small_datasets(seed: u64) -> (ImagePair, ImagePair, PatchDataset, PatchDataset) {
    let target = small_pair(seed, 24);
    let source = small_pair(seed + 50, 24);
    let cfg = tiny_pipeline(1);
    let pre = pipeline::preclassify(&target, &cfg, seed).unwrap();
    let tds = pipeline::target_dataset(&target, &pre, &cfg, seed).unwrap();
    let sds = pipeline::source_dataset(&source, &cfg, seed).unwrap();
    (source, target, sds, tds)
}

#[test]
fn training_reduces_loss() {
    let (_, _, sds, tds) = small_datasets(1);
    let cfg = TrainConfig { epochs: 30, base_lr: 1e-3, batch_size: 8, ..Default::default() };
    let out = train(Some(&sds), &tds, &tiny_model(), &cfg).unwrap();
    assert_eq!(out.history.len(), 30);
    let first = out.history[0].loss_target;
    let last = out.history.last().unwrap().loss_target;
    assert!(last < first, "{first} -> {last}");
    assert!(out.params.all_finite());
}

#[test]
fn training_is_deterministic() {
    let (_, _, sds, tds) = small_datasets(2);
    let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 9, ..Default::default() };
    let a = train(Some(&sds), &tds, &tiny_model(), &cfg).unwrap();
    let b = train(Some(&sds), &tds, &tiny_model(), &cfg).unwrap();
    let bytes = |p| Checkpoint { config: tiny_model(), params: p, support: None }.to_bytes().unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(bytes(a.params), bytes(b.params));
}

#[test]
fn training_rejects_mismatched_patch_sides() {
    let (_, _, sds, tds) = small_datasets(3);
    let cfg = ModelConfig { r: 5, ..tiny_model() };
    let err = train(Some(&sds), &tds, &cfg, &TrainConfig { epochs: 1, ..Default::default() });
    assert!(matches!(err, Err(GksError::Config(_))));
}

#[test]
fn support_set_sampling() {
    let (_, _, sds, _) = small_datasets(4);
    let n = sds.len();
    let whole = build_support_set(&sds, n, 1).unwrap();
    assert_eq!(whole.len(), n);
    assert_eq!(build_support_set(&sds, 5, 7).unwrap(), build_support_set(&sds, 5, 7).unwrap());
    assert!(build_support_set(&sds, n + 1, 1).is_err());
}

#[test]
fn support_overlap_near_hypergeometric_mean() {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let mut total = 0usize;
    let repeats = 400;
    for rep in 0..repeats {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(2 * rep);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(2 * rep + 1);
        let x: std::collections::HashSet<usize> = sample(&mut a, 1000, 64).into_iter().collect();
        total += sample(&mut b, 1000, 64).into_iter().filter(|i| x.contains(i)).count();
    }
    let mean = total as f64 / repeats as f64;
    assert!((mean - 64.0 * 64.0 / 1000.0).abs() < 0.5, "{mean}");
}

#[test]
fn empty_uncertain_set_skips_network() {
    let pair = small_pair(5, 16);
    let di = log_ratio_di(&pair, 1e-3).unwrap();
    let gt = pair.ground_truth().unwrap().clone();
    let map = PreclassMap::from_mask(&gt);
    let cfg = tiny_model();
    let mut params = model::model_init(&cfg, 0).unwrap();
    params.trainable[names::FC1_W].data_mut()[0] = f64::NAN;
    let ex = PatchExtractor::new(&pair, &di).unwrap();
    let cm = predict_change_map(&ex, &map, &params, &cfg, None, PredictMode::UncertainOnly).unwrap();
    assert_eq!(cm, gt);
    let err = predict_change_map(&ex, &map, &params, &cfg, None, PredictMode::Full);
    assert!(matches!(err, Err(GksError::NonFinite(_))));
}

#[test]
fn checkpoint_config_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gks");
    let cfg = tiny_model();
    Checkpoint { config: cfg.clone(), params: model::model_init(&cfg, 0).unwrap(), support: None }
        .save(&path)
        .unwrap();
    let other = ModelConfig { fusion: Fusion::None, ..cfg.clone() };
    assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(GksError::ConfigMismatch(_))));
    assert!(Checkpoint::load_expecting(&path, &cfg).is_ok());
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn pipeline_runs_are_identical() {
    let (source, target, _, _) = small_datasets(6);
    let cfg = tiny_pipeline(2);
    let a = run_pipeline(&source, &target, &cfg, 11).unwrap();
    let b = run_pipeline(&source, &target, &cfg, 11).unwrap();
    assert_eq!(a.change_map, b.change_map);
    assert_eq!(a.trained.checkpoint.to_bytes().unwrap(), b.trained.checkpoint.to_bytes().unwrap());
    assert_eq!(a.metrics.unwrap().to_json(), b.metrics.unwrap().to_json());
}

#[test]
fn ablation_and_combination_counts() {
    let (source, target, _, _) = small_datasets(7);
    let cfg = tiny_pipeline(1);
    let rows = run_ablation(&source, &target, &cfg, &[Variant::Basic], &[3]).unwrap();
    assert_eq!(rows.len(), 1);
    let rows = run_ablation(&source, &target, &cfg, &[Variant::Basic, Variant::Full], &[1, 2]).unwrap();
    assert_eq!(rows.len(), 4);
    let csv = pipeline::ablation_csv(&rows);
    assert_eq!(csv.lines().count(), 1 + 4 + 2);
    let data = vec![("s".to_string(), source), ("t".to_string(), target)];
    let cells = run_combination_matrix(&data, &cfg, &[0]).unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells.iter().all(|c| c.source != c.target));
    assert!(run_combination_matrix(&data[..1], &cfg, &[0]).is_err());
}

#[test]
fn constant_difference_image_is_unchanged() {
    let di = DifferenceImage(Image::filled(8, 8, 0.0));
    let map = hierarchical_preclassify(&di, 0).unwrap();
    assert_eq!(map.count(PixelClass::Unchanged), 64);
}

#[test]
fn metrics_from_maps() {
    let gt = Mask::from_fn(4, 4, |r, _| u8::from(r < 2));
    assert_eq!(Metrics::evaluate(&gt, &gt).unwrap().oe, 0);
    let inv = gt.map(|&v| 1 - v);
    let m = Metrics::evaluate(&inv, &gt).unwrap();
    assert_eq!((m.tp, m.tn), (0, 0));
    assert!(Metrics::evaluate(&Mask::filled(3, 4, 0), &gt).is_err());
}
