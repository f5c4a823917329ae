#![allow(clippy::field_reassign_with_default)]

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splat::deteval::iou;
use splat::models::Generator;
use splat::pipeline::{
    self, adapt_into, checkpoint, evaluate_detector, new_detector, train_detector, DetectorJob, DetectorLoss,
    ExperimentConfig, LossSet, RunLayout, TransformerMode, TransformerTrainer,
};
use splat::synthdata::{Dataset, SceneConfig, Style};
use splat::Error;

fn tiny(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data_dir = root.join("data");
    cfg.out_dir = root.join("runs");
    cfg.n_source_det = 8;
    cfg.n_source_seg = 8;
    cfg.n_target_train = 6;
    cfg.n_target_eval = 6;
    cfg.n_source_eval = 6;
    cfg.detector_iters = 4;
    cfg.tasknet_iters = 3;
    cfg.transformer_iters = 2;
    cfg.checkpoint_every = 1;
    cfg.batch_size = 2;
    cfg
}

fn pseudo() -> LossSet {
    LossSet::new([DetectorLoss::Pseudo]).unwrap()
}

fn data(n: u64, style: Style) -> Dataset {
    Dataset::render(0..n, &SceneConfig::default(), style)
}

fn no_log(_: usize, _: &pipeline::LossRow) -> splat::Result<()> {
    Ok(())
}

#[test]
fn zero_iterations_keep_initial_weights() {
    let cfg = tiny(Path::new("/nonexistent"));
    let ds = data(4, Style::Source);
    let mut det = new_detector(&cfg);
    let before = det.params.clone();
    let job = DetectorJob {
        images: &ds,
        labels: ds.boxes.as_ref().unwrap(),
        losses: pseudo(),
        pair: None,
    };
    train_detector(&mut det, job, &cfg, 0, 1, &mut no_log).unwrap();
    for id in before.ids() {
        assert_eq!(before.get(id).data(), det.params.get(id).data(), "{}", before.name(id));
    }
}

#[test]
fn overfits_one_image() {
    let cfg = tiny(Path::new("/nonexistent"));
    let ds = data(1, Style::Source);
    let mut det = new_detector(&cfg);
    let mut losses = Vec::new();
    let job = DetectorJob {
        images: &ds,
        labels: ds.boxes.as_ref().unwrap(),
        losses: pseudo(),
        pair: None,
    };
    train_detector(&mut det, job, &cfg, 300, 2, &mut |_, row| {
        losses.push(row.iter().find(|(k, _)| *k == "total").unwrap().1);
        Ok(())
    })
    .unwrap();
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last * 10.0 <= first, "loss {first} -> {last}");
    let dets = det.detect(&ds.batch(&[0]), &[0], 0.5, 0.5).unwrap();
    let gt = &ds.boxes.as_ref().unwrap()[0];
    for g in gt {
        assert!(dets[0].iter().any(|d| iou(&d.bbox, &g.bbox).unwrap() > 0.5), "{dets:?} vs {gt:?}");
    }
}

#[test]
fn checkpoint_round_trip_keeps_map_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let train = data(6, Style::Source);
    let eval = Dataset::render(100..108, &SceneConfig::default(), Style::Source);
    let mut det = new_detector(&cfg);
    let job = DetectorJob {
        images: &train,
        labels: train.boxes.as_ref().unwrap(),
        losses: pseudo(),
        pair: None,
    };
    train_detector(&mut det, job, &cfg, 20, 3, &mut no_log).unwrap();
    let before = evaluate_detector(&mut det, &eval, &cfg).unwrap();
    let stem = dir.path().join("det");
    checkpoint::save(&stem, "detector", &det.params).unwrap();
    let mut loaded = pipeline::load_detector(&stem).unwrap();
    let after = evaluate_detector(&mut loaded, &eval, &cfg).unwrap();
    assert_eq!(before.map.to_bits(), after.map.to_bits());
    assert!(checkpoint::load(&stem, "generator-lite", &mut loaded.params).is_err());
}

#[test]
fn empty_split_is_a_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("empty")).unwrap();
    assert!(matches!(
        Dataset::load(&dir.path().join("empty"), "boxes"),
        Err(Error::MissingDataset(_))
    ));
    let cfg = tiny(dir.path());
    assert!(matches!(pipeline::train_source(&cfg), Err(Error::MissingDataset(_))));
}

#[test]
fn lite_needs_a_task_net() {
    let cfg = tiny(Path::new("/nonexistent"));
    assert!(TransformerTrainer::new(&cfg, TransformerMode::Lite, None, 0).is_err());
    assert!(TransformerTrainer::new(&cfg, TransformerMode::Cycle, None, 0).is_ok());
}

#[test]
fn empty_loss_set_is_rejected() {
    assert!(matches!(LossSet::new([]), Err(Error::Config(_))));
    let mut cfg = ExperimentConfig::default();
    assert!(cfg.set("losses", "").is_err());
    cfg.set("losses", "pseudo,pair").unwrap();
    assert!(cfg.losses.contains(DetectorLoss::Pair));
}

#[test]
fn adapt_writes_one_image_per_input_and_zero_generator_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data(5, Style::Source);
    let mut g = Generator::new("generator", 1, &mut ChaCha8Rng::seed_from_u64(0));
    g.zero_output();
    let n = adapt_into(&mut g, &ds, dir.path()).unwrap();
    assert_eq!(n, 5);
    let pngs = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 5);
    let out = Dataset::load(dir.path(), "boxes").unwrap();
    let first = out.images[0].data()[0];
    for img in &out.images {
        assert!(img.data().iter().all(|&v| v == first));
    }
}

#[test]
fn stages_chain_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::gen_data(&cfg).unwrap();
    let src = pipeline::train_source(&cfg).unwrap();
    assert!((0.0..=100.0).contains(&src));
    pipeline::train_tasknet_stage(&cfg).unwrap();
    let stats = pipeline::train_transformer(&cfg, TransformerMode::Lite).unwrap();
    assert_eq!(stats.len(), 2);
    assert!(stats.iter().all(|s| s.generator_forwards == 1 && s.tasknet_forwards == 1));
    let (kept, total) = pipeline::pseudo_label(&cfg, 1.01).unwrap();
    assert_eq!(kept, 0);
    assert!(total > 0);
    assert_eq!(pipeline::adapt(&cfg, TransformerMode::Lite).unwrap(), 8);
    let layout = RunLayout::new(&cfg);
    assert!(checkpoint::exists(&layout.generator(TransformerMode::Lite)));
    let map = pipeline::train_target(&cfg, TransformerMode::Lite, &pseudo()).unwrap();
    assert!((0.0..=100.0).contains(&map));
}
