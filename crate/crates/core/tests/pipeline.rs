use clausenet::data::{generate_synthetic, load_jsonl, write_dataset};
use clausenet::report::explain;
use clausenet::train::{evaluate, split, train};
use clausenet::{Dataset, Error, Model, ModelConfig, SyntheticSpec, TrainConfig};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 12,
        z: 2,
        f: 4,
        tokens_min: 2,
        tokens_max: 4,
        rule_token: Some(3),
        rule_prototype: None,
        noise: 0.0,
        seed: 11,
        ..Default::default()
    }
}

fn small_config(spec: &SyntheticSpec) -> ModelConfig {
    ModelConfig {
        vocab_size: spec.vocab_size,
        d: 8,
        z: spec.z,
        f: spec.f,
        k: 2,
        g: 3,
        beta: 0.25,
        layers: vec![0],
        ..Default::default()
    }
}

#[test]
fn training_reduces_loss_and_restores_best_epoch() {
    let spec = small_spec();
    let samples = generate_synthetic(&spec, 160).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 6,
        batch_size: 16,
        ..Default::default()
    };
    let (train_set, val_set) = split(&samples, 0.25, 1).unwrap();
    let mut model = Model::new(small_config(&spec), spec.labels.clone(), 1).unwrap();
    let mut seen = Vec::new();
    let outcome = train(&mut model, &train_set, &val_set, &cfg, |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, outcome.history);
    let first = outcome.history.first().unwrap().train_loss;
    let last = outcome.history.last().unwrap().train_loss;
    assert!(last < first, "loss went from {first} to {last}");
    let best = outcome
        .history
        .iter()
        .map(|r| r.val_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(outcome.best_val_accuracy, best);
    assert_eq!(evaluate(&model, &val_set).unwrap().accuracy, best);
}

#[test]
fn saved_model_reproduces_predictions() {
    let spec = small_spec();
    let samples = generate_synthetic(&spec, 12).unwrap();
    let model = Model::new(small_config(&spec), spec.labels.clone(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let train_cfg = TrainConfig {
        lr: 0.5,
        ..Default::default()
    };
    model.save(&path, Some(&train_cfg)).unwrap();
    let (loaded, stored) = Model::load(&path).unwrap();
    assert_eq!(stored, Some(train_cfg));
    for s in &samples {
        assert_eq!(model.predict(s).unwrap(), loaded.predict(s).unwrap());
        assert_eq!(explain(&model, s).unwrap(), explain(&loaded, s).unwrap());
    }
    // saving the loaded model gives the same bytes
    let again = dir.path().join("again.json");
    loaded.save(&again, Some(&TrainConfig { lr: 0.5, ..Default::default() })).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn dataset_files_round_trip_and_need_sidecar() {
    let spec = small_spec();
    let dataset = Dataset {
        meta: spec.meta(),
        samples: generate_synthetic(&spec, 7).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &dataset).unwrap();
    assert_eq!(load_jsonl(&path).unwrap(), dataset);

    std::fs::remove_file(dir.path().join("d.meta.json")).unwrap();
    assert!(matches!(load_jsonl(&path), Err(Error::Config(_))));
}

#[test]
fn loading_rejects_tampered_shapes() {
    let spec = small_spec();
    let model = Model::new(small_config(&spec), spec.labels.clone(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path, None).unwrap();
    let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    json["config"]["d"] = serde_json::json!(9);
    std::fs::write(&path, serde_json::to_vec(&json).unwrap()).unwrap();
    assert!(Model::load(&path).is_err());
}
