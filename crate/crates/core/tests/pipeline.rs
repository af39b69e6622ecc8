//! End-to-end: train on synthetic data, export telemetry, checkpoint, reload
//! and run both inference paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rebnn::checkpoint;
use rebnn::data::synthetic;
use rebnn::model::{InferencePath, Model, ModelSpec};
use rebnn::rebnn::{evaluate, GammaMode, TrainConfig, Trainer};
use rebnn::telemetry::{export_csv, export_json, import_json, RunLog, CSV_HEADER};

fn trained(mode: GammaMode, epochs: usize) -> (Model, RunLog) {
    let data = synthetic(96, [1, 8, 8], 4, 11).unwrap();
    let spec = ModelSpec {
        widths: [4, 8, 8],
        strides: [1, 2, 1],
        binary: true,
    };
    let config = TrainConfig {
        epochs,
        batch_size: 32,
        gamma_mode: mode,
        seed: 5,
        ..TrainConfig::default()
    };
    let model = Model::desk_cnn(
        [1, 8, 8],
        4,
        &spec,
        config.initial_gamma() as f32,
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    let mut trainer = Trainer::new(model, config.clone(), data.len()).unwrap();
    let mut log = RunLog::new(
        "pipeline",
        serde_json::to_value(&config).unwrap(),
        trainer.layer_infos(),
    );
    trainer.fit(&data, Some(&data), &mut log).unwrap();
    (trainer.into_model(), log)
}

#[test]
fn telemetry_files_round_trip() {
    let (_, log) = trained(GammaMode::Adaptive, 3);
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("t.json");
    let csv = dir.path().join("t.csv");
    export_json(&log, &json).unwrap();
    export_csv(&log, &csv).unwrap();
    assert_eq!(import_json(&json).unwrap(), log);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.count(), 3 * 2);
    assert_eq!(log.histograms.len(), 3 * 2);
    for h in &log.histograms {
        assert_eq!(h.counts.len(), 64);
        assert_eq!(h.counts.iter().sum::<u64>(), log.layers[h.layer].weight_count as u64);
    }
}

#[test]
fn epoch_ratios_are_exact_means_of_iteration_ratios() {
    let (_, log) = trained(GammaMode::Adaptive, 2);
    for e in &log.epochs {
        for l in &e.layers {
            let its: Vec<_> = log
                .iterations
                .iter()
                .filter(|r| r.epoch == e.epoch)
                .map(|r| &r.oscillation[l.layer])
                .collect();
            let seq: u64 = its.iter().map(|o| o.sequential_count).sum();
            let n: u64 = its.iter().map(|o| o.weight_count).sum();
            assert_eq!(l.sequential_ratio, seq as f64 / n as f64);
            let mean = its.iter().map(|o| o.sequential_ratio).sum::<f64>() / its.len() as f64;
            assert!((l.sequential_ratio - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_reload_preserves_predictions_on_both_paths() {
    let (model, _) = trained(GammaMode::Adaptive, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rbnn");
    checkpoint::save(&path, &model, &serde_json::json!({"k": 1}), true).unwrap();
    let loaded = checkpoint::load(&path).unwrap().model;
    assert_eq!(loaded, model);
    let data = synthetic(40, [1, 8, 8], 4, 3).unwrap();
    let (x, _) = data.batch(&(0..40).collect::<Vec<_>>()).unwrap();
    let float = loaded.forward_eval(&x, InferencePath::Float).unwrap();
    let packed = loaded.forward_eval(&x, InferencePath::Packed).unwrap();
    let bits = |t: &rebnn::numcore::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&float), bits(&packed));
    assert_eq!(
        bits(&model.forward_eval(&x, InferencePath::Float).unwrap()),
        bits(&float)
    );
    assert_eq!(
        evaluate(&loaded, &data, InferencePath::Packed, 8).unwrap(),
        evaluate(&model, &data, InferencePath::Float, 13).unwrap()
    );
}

#[test]
fn training_learns_the_synthetic_task() {
    let (model, log) = trained(GammaMode::Adaptive, 6);
    let first = log.epochs.first().unwrap().train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    assert!(last < first, "loss {first} -> {last}");
    let data = synthetic(96, [1, 8, 8], 4, 11).unwrap();
    assert!(evaluate(&model, &data, InferencePath::Packed, 32).unwrap() > 0.5);
}

#[test]
fn every_gamma_mode_trains_deterministically() {
    for mode in [
        GammaMode::Adaptive,
        GammaMode::Constant(1e-4),
        GammaMode::MaxGradOnly,
        GammaMode::Off,
    ] {
        let (m1, l1) = trained(mode, 1);
        let (m2, l2) = trained(mode, 1);
        assert_eq!(m1, m2, "{mode:?}");
        assert_eq!(l1.iterations, l2.iterations, "{mode:?}");
    }
}

#[test]
fn max_grad_only_gamma_is_clamped_and_constant_is_not_updated() {
    let (m, _) = trained(GammaMode::MaxGradOnly, 1);
    for b in m.binary_layers() {
        assert!(b.layer.gamma.iter().all(|g| (1e-5f32..=2e-4f32).contains(g)));
    }
    let (m, _) = trained(GammaMode::Constant(3e-3), 1);
    for b in m.binary_layers() {
        assert!(b.layer.gamma.iter().all(|&g| g == 3e-3f32));
    }
}

#[test]
fn off_and_adaptive_diverge_under_the_same_seed() {
    let (_, a) = trained(GammaMode::Adaptive, 2);
    let (_, b) = trained(GammaMode::Off, 2);
    assert_eq!(a.iterations[0].task_loss, b.iterations[0].task_loss);
    assert_ne!(a.iterations, b.iterations);
    assert!(b.iterations.iter().all(|r| r.reconstruction_loss == 0.0));
}

#[test]
fn zero_learning_rate_on_one_batch_keeps_the_loss_fixed() {
    let data = synthetic(16, [1, 8, 8], 4, 3).unwrap();
    let config = TrainConfig {
        eta: 0.0,
        epochs: 4,
        batch_size: 16,
        seed: 2,
        ..TrainConfig::default()
    };
    let spec = ModelSpec {
        widths: [4, 8, 8],
        strides: [1, 2, 1],
        binary: true,
    };
    let model = Model::desk_cnn(
        [1, 8, 8],
        4,
        &spec,
        config.initial_gamma() as f32,
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    let mut trainer = Trainer::new(model, config.clone(), data.len()).unwrap();
    let mut log = RunLog::new("lr0", serde_json::Value::Null, trainer.layer_infos());
    trainer.fit(&data, None, &mut log).unwrap();
    let first = log.iterations[0].task_loss;
    // the shuffle reorders the f32 batch sums, nothing else moves
    assert!(log
        .iterations
        .iter()
        .all(|r| ((r.task_loss - first) / first).abs() < 1e-6));
    assert!(log
        .iterations
        .iter()
        .flat_map(|r| &r.oscillation)
        .all(|o| o.flip_count == 0));
}
