use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saeids::calibration::is_anomalous;
use saeids::ensemble::ModelSet;
use saeids::eval::{generate_dataset, SynthConfig};
use saeids::exec::ExecMode;
use saeids::features::{featurize, FeatureConfig, FeatureVector, Label};
use saeids::model::{fit_device_model, SparseAutoencoderModel};
use saeids::sae::Hyperparams;
use saeids::Error;

const N: usize = 4;

fn small_config() -> SynthConfig {
    SynthConfig {
        flows_per_device: 120,
        malicious_flows: 100,
        ..SynthConfig::default()
    }
}

fn quick_hp() -> Hyperparams {
    Hyperparams {
        max_epochs: 40,
        ..Hyperparams::default()
    }
}

fn trained() -> (Vec<SparseAutoencoderModel>, Vec<FeatureVector>) {
    let corpus = generate_dataset(&small_config()).unwrap();
    let mut models = Vec::new();
    for (d, device) in corpus.devices.iter().enumerate() {
        let vs: Vec<FeatureVector> = corpus
            .legit_of(device)
            .map(|f| featurize(&f.flow, N).unwrap())
            .collect();
        let (train, val) = vs.split_at(90);
        models.push(
            fit_device_model(
                device,
                train,
                val,
                FeatureConfig::new(N),
                &quick_hp(),
                d as u64,
            )
            .unwrap()
            .model,
        );
    }
    let all = corpus
        .flows
        .iter()
        .map(|f| featurize(&f.flow, N).unwrap())
        .collect();
    (models, all)
}

#[test]
fn verdicts_match_standalone_models() {
    let (models, vs) = trained();
    let set = ModelSet::new(models.clone()).unwrap();
    for (v, verdict) in vs.iter().zip(set.decide_batch(&vs).unwrap()) {
        assert_eq!(verdict.flow_id, v.flow_id);
        let mut all = true;
        for (m, d) in models.iter().zip(&verdict.per_model) {
            let standalone = is_anomalous(m, &m.normalize(v).unwrap()).unwrap();
            assert_eq!(d.decision, standalone);
            assert_eq!(d.device_type, m.device_type);
            all &= standalone;
        }
        assert_eq!(verdict.anomalous, all);
    }
}

#[test]
fn model_order_and_batch_order_do_not_matter() {
    let (mut models, mut vs) = trained();
    let set = ModelSet::new(models.clone()).unwrap();
    let base: Vec<(u64, bool)> = set
        .decide_batch(&vs)
        .unwrap()
        .iter()
        .map(|v| (v.flow_id, v.anomalous))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    models.shuffle(&mut rng);
    vs.shuffle(&mut rng);
    let shuffled = ModelSet::new(models).unwrap();
    let mut other: Vec<(u64, bool)> = shuffled
        .decide_batch(&vs)
        .unwrap()
        .iter()
        .map(|v| (v.flow_id, v.anomalous))
        .collect();
    other.sort();
    let mut base = base;
    base.sort();
    assert_eq!(base, other);
}

#[test]
fn sequential_and_parallel_agree() {
    let (models, vs) = trained();
    let set = ModelSet::new(models).unwrap();
    assert_eq!(
        set.decide_batch_with(&vs, ExecMode::Sequential).unwrap(),
        set.decide_batch_with(&vs, ExecMode::Parallel).unwrap()
    );
}

#[test]
fn empty_batch_gives_empty_output() {
    let (models, _) = trained();
    let set = ModelSet::new(models).unwrap();
    assert!(set.decide_batch(&[]).unwrap().is_empty());
}

#[test]
fn ten_thousand_flows_under_a_second() {
    let (models, vs) = trained();
    let set = ModelSet::new(models).unwrap();
    let batch: Vec<FeatureVector> = vs.iter().cycle().take(10_000).cloned().collect();
    let t0 = Instant::now();
    let out = set.decide_batch(&batch).unwrap();
    assert_eq!(out.len(), 10_000);
    assert!(t0.elapsed().as_secs_f64() < 1.0, "took {:?}", t0.elapsed());
}

#[test]
fn malicious_flows_are_mostly_flagged() {
    let corpus = generate_dataset(&small_config()).unwrap();
    let (models, vs) = trained();
    let set = ModelSet::new(models).unwrap();
    let verdicts = set.decide_batch(&vs).unwrap();
    let flagged = corpus
        .flows
        .iter()
        .zip(&verdicts)
        .filter(|(f, v)| f.label == Label::Malicious && v.anomalous)
        .count();
    assert!(flagged >= 80, "only {flagged}/100 malicious flows flagged");
}

#[test]
fn inconsistent_sets_are_rejected() {
    let (models, vs) = trained();

    let mut uncalibrated = models.clone();
    uncalibrated[0].threshold = None;
    assert!(ModelSet::new(uncalibrated).is_err());

    let mut duplicate = models.clone();
    duplicate[1].device_type = duplicate[0].device_type.clone();
    assert!(matches!(ModelSet::new(duplicate), Err(Error::Config(_))));

    let mut mixed_n = models.clone();
    mixed_n[2].features.n = N + 1;
    assert!(matches!(ModelSet::new(mixed_n), Err(Error::Config(_))));

    let set = ModelSet::new(models).unwrap();
    let mut wrong = vs[0].clone();
    wrong.n = N + 1;
    assert!(set.decide(&wrong).is_err());
}

#[test]
fn load_dir_round_trips_and_reports_gaps() {
    let (models, vs) = trained();
    let dir = tempfile::tempdir().unwrap();
    for m in &models {
        m.save(&dir.path().join(format!("{}.json", m.device_type)))
            .unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let loaded = ModelSet::load_dir(dir.path()).unwrap();
    let direct = ModelSet::new(models).unwrap();
    assert_eq!(loaded.len(), 4);
    assert_eq!(loaded.n(), N);
    assert_eq!(
        loaded.decide_batch(&vs).unwrap(),
        direct.decide_batch(&vs).unwrap()
    );
    assert_eq!(
        loaded.coverage_gaps(&["smart_plug", "thermostat"]),
        vec!["thermostat"]
    );

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        ModelSet::load_dir(empty.path()),
        Err(Error::Config(_))
    ));
}
