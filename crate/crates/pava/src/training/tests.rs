use ndarray::Array1;

use super::*;
use crate::dataset::{split, synth_dataset, SynthConfig};
use crate::model::{ClassifierConfig, FeatureExtractorSpec};

fn tiny_setup(dir: &Path, clips_per_class: usize) -> (DatasetManifest, DatasetManifest, TrainedModel) {
    let cfg = SynthConfig {
        classes: 3,
        clips_per_class,
        frames: 8,
        height: 16,
        width: 16,
        ..SynthConfig::default()
    };
    let all = synth_dataset(&cfg, dir).unwrap();
    let n = all.len();
    let (train, val) = split(&all, n - 3, 3, 1, false).unwrap();
    let config = ClassifierConfig {
        n_frames: 6,
        feature_dim: 8,
        lstm_hidden: 8,
        ..ClassifierConfig::desk(3)
    };
    let model = TrainedModel::new(FeatureExtractorSpec::tiny_test_backbone((16, 16)), config, 2).unwrap();
    (train, val, model)
}

#[test]
fn cross_entropy_values() {
    let p = Array1::from(vec![0.0, 1.0, 0.0]);
    assert_eq!(cross_entropy(p.view(), 1), 0.0);
    assert!((cross_entropy(p.view(), 0) - (-(1e-12f64).ln())).abs() < 1e-9);
    let u = Array1::from_elem(18, 1.0 / 18.0);
    assert!((cross_entropy(u.view(), 4) - 2.8904).abs() < 1e-4);
}

#[test]
fn frozen_backbone_survives_an_optimizer_step() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _, mut model) = tiny_setup(dir.path(), 2);
    let loader = ClipLoader::for_model(&model, false);
    let batch: Vec<_> = train
        .records
        .iter()
        .take(4)
        .map(|r| (loader.load(&r.path, 1, false).unwrap(), r.label.index()))
        .collect();
    let before = model.clone();
    let bg = model.batch_gradient(&batch).unwrap();
    Adam::new(0.0, None).step(&mut model, &bg.gradients, 0.01);
    assert_eq!(model.params.backbone, before.params.backbone);
    assert_ne!(model.params.projection, before.params.projection);
    assert_ne!(model.params.lstm, before.params.lstm);
    assert_ne!(model.params.head_fc, before.params.head_fc);
    assert_ne!(model.params.head_bn.gamma, before.params.head_bn.gamma);

    let mut unfrozen = before.clone();
    unfrozen.spec.frozen = false;
    let bg = unfrozen.batch_gradient(&batch).unwrap();
    Adam::new(0.0, None).step(&mut unfrozen, &bg.gradients, 0.01);
    assert_ne!(unfrozen.params.backbone, before.params.backbone);
}

#[test]
fn same_seed_same_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, model) = tiny_setup(dir.path(), 4);
    let cfg = TrainConfig {
        epochs: 2,
        hflip_prob: 0.5,
        ..TrainConfig::default()
    };
    let a = super::train(model.clone(), &train, &val, &cfg).unwrap();
    let b = super::train(model, &train, &val, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.last, b.last);
    assert_eq!(a.best.provenance.trained_on, Some(SubDataset::Original));
}

#[test]
fn fine_tune_bookkeeping() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, model) = tiny_setup(dir.path(), 2);
    assert!(fine_tune(&model, &train, &val, &TrainConfig::default()).is_err());
    let mut trained = model;
    trained.provenance.trained_on = Some(SubDataset::Original);
    let blurred = train.filter(|_| true);
    let blurred = DatasetManifest {
        sub_dataset: SubDataset::Blurred,
        ..blurred
    };
    let zero = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = fine_tune(&trained, &blurred, &val, &zero).unwrap();
    assert_eq!(out.best.params, trained.params);
    assert_eq!(out.best.provenance.trained_on, Some(SubDataset::Original));
    assert_eq!(out.best.provenance.fine_tuned_on, Some(SubDataset::Blurred));
    assert!(out.history.is_empty());
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, mut model) = tiny_setup(dir.path(), 2);
    model.params.head_fc.weight[[0, 0]] = f64::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        lr0: 0.003,
        ..TrainConfig::default()
    };
    match super::train(model, &train, &val, &cfg) {
        Err(Error::NonFiniteLoss { epoch, batch, lr }) => {
            assert_eq!((epoch, batch), (0, 0));
            assert_eq!(lr, 0.003);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn history_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("history.csv");
    let h = vec![
        EpochRecord { epoch: 0, train_loss: 1.5, val_loss: 1.25, val_acc: 0.5, lr: 0.001 },
        EpochRecord { epoch: 1, train_loss: 1.0, val_loss: 1.125, val_acc: 0.75, lr: 0.0001 },
    ];
    write_history(&p, &h).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss,val_acc,lr\n"));
    assert_eq!(read_history(&p).unwrap(), h);
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { lr0: 0.0, ..TrainConfig::default() },
        TrainConfig { scheduler: SchedulerConfig { patience: 5, factor: 1.0 }, ..TrainConfig::default() },
        TrainConfig { hflip_prob: 1.5, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}
