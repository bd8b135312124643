mod common;

use crystvox_core::GridSpec;
use crystvox_models::toy::{toy_cells, toy_samples};
use crystvox_models::{ModelConfig, ModelError, TrainConfig, TrainSample, Trainer};

#[test]
fn fixed_seed_reproduces_metrics_and_weights() {
    let samples = common::tiny_samples(5, 2);
    let cfg = TrainConfig { batch: 2, lr: 1e-3, seed: 17, ..TrainConfig::default() };
    let run = || {
        let mut t = Trainer::<f64>::new(ModelConfig::tiny(), cfg.clone()).unwrap();
        let log = t.train(&samples, 6, |_| {}).unwrap();
        (serde_json::to_string(&log).unwrap(), t.store)
    };
    let (log_a, store_a) = run();
    let (log_b, store_b) = run();
    assert_eq!(log_a, log_b);
    for ((na, a), (nb, b)) in store_a.iter().zip(store_b.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn metrics_records_use_loss_names() {
    let samples = common::tiny_samples(2, 3);
    let mut t = Trainer::<f32>::new(ModelConfig::tiny(), TrainConfig::default()).unwrap();
    let r = t.step(&samples).unwrap();
    let json: serde_json::Value = serde_json::to_value(r).unwrap();
    for key in ["step", "L_RE", "KL", "L_BCE", "total"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(t.steps_done(), 1);
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let mut samples = common::tiny_samples(2, 4);
    samples[0].density[10] = f32::NAN;
    let mut t = Trainer::<f32>::new(ModelConfig::tiny(), TrainConfig { batch: 2, ..TrainConfig::default() }).unwrap();
    match t.step(&samples) {
        Err(ModelError::NonFiniteLoss { step, detail }) => {
            assert_eq!(step, 0);
            assert!(detail.contains("L_RE"));
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn mismatched_labels_are_rejected() {
    let mut samples: Vec<TrainSample> = common::tiny_samples(1, 5);
    samples[0].labels[0] = 50;
    let mut t = Trainer::<f32>::new(ModelConfig::tiny(), TrainConfig::default()).unwrap();
    assert!(matches!(t.step(&samples), Err(ModelError::InvalidInput(_))));
}

#[test]
fn toy_cells_keep_atoms_apart() {
    let cells = toy_cells(20, 1);
    assert_eq!(cells.len(), 20);
    for cell in &cells {
        assert!((2..=4).contains(&cell.sites().len()));
    }
}

#[test]
fn smoke_training_reduces_reconstruction_error() {
    let samples = toy_samples(8, 1, &GridSpec::default()).unwrap();
    let model = ModelConfig { dec_channels: [8, 4, 4, 2], unet_base: 2, ..ModelConfig::desk() };
    let mut t = Trainer::<f32>::new(model, TrainConfig { batch: 2, lr: 1e-3, seed: 1, ..TrainConfig::default() }).unwrap();
    let log = t.train(&samples, 200, |_| {}).unwrap();
    assert!(log.iter().all(|r| r.total.is_finite()));
    let last = log.last().unwrap().l_re;
    assert!(last < log[0].l_re, "{} -> {last}", log[0].l_re);
}
