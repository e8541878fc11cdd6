use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pava::dataset::{ClipRecord, DatasetManifest, Split, SubDataset, Variant};
use pava::ensemble::{build_final_ensemble, EnsembleMember, EnsemblePredictor, EnsembleSpec, MemberRef};
use pava::eval::{evaluate, ModelPredictor};
use pava::model::{feature_path_for, save_checkpoint, write_features, ClassifierConfig, FeatureExtractorSpec, TrainedModel};
use pava::preprocess::Normalization;
use pava::training::{fine_tune, train, TrainConfig};
use pava::ActivityLabel;

const CLASSES: usize = 3;
const DIM: usize = 6;

/// Feature sidecars whose mean depends on the class; `noise` widens the spread.
fn feature_manifest(dir: &Path, tag: &str, per_class: usize, noise: f64, variant: Variant, seed: u64) -> DatasetManifest {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for c in 0..CLASSES {
        for k in 0..per_class {
            let clip_id = format!("{tag}-{c}-{k}");
            let path = dir.join(format!("{clip_id}.pclip"));
            let f = Array2::from_shape_fn((6, DIM), |(_, j)| {
                let centre = if j % CLASSES == c { 1.0 } else { -0.5 };
                centre + noise * rng.random_range(-1.0..1.0)
            });
            write_features(feature_path_for(&path), &f).unwrap();
            records.push(ClipRecord {
                clip_id,
                path,
                label: ActivityLabel::from_index(c).unwrap(),
                subject_id: "s".into(),
                split: Split::Train,
                variant,
            });
        }
    }
    DatasetManifest::new(records)
}

fn spec(name: &str) -> FeatureExtractorSpec {
    FeatureExtractorSpec {
        name: name.into(),
        input_resolution: (1, 1),
        raw_feature_dim: DIM,
        frozen: true,
        normalization: Normalization::IDENTITY,
    }
}

#[test]
fn final_ensemble_of_four_original_and_four_fine_tuned_members() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let orig_train = feature_manifest(&d.join("o"), "ot", 6, 0.3, Variant::Original, 1);
    let orig_val = feature_manifest(&d.join("o"), "ov", 2, 0.3, Variant::Original, 2);
    let blur_train = feature_manifest(&d.join("b"), "bt", 6, 0.9, Variant::Blurred, 3);
    let blur_val = feature_manifest(&d.join("b"), "bv", 2, 0.9, Variant::Blurred, 4);
    let calibration = feature_manifest(&d.join("c"), "cal", 4, 0.6, Variant::Original, 5);
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };

    let mut original = Vec::new();
    let mut tuned = Vec::new();
    for (i, name) in ["resnext101", "densenet121", "wide_resnet101", "wide_resnet101_attention"].iter().enumerate() {
        let config = ClassifierConfig {
            feature_dim: 8,
            lstm_hidden: 8,
            num_classes: CLASSES,
            n_frames: 4,
            attention: name.ends_with("attention"),
            ..ClassifierConfig::default()
        };
        let model = TrainedModel::new(spec(name), config, i as u64).unwrap();
        let o = train(model, &orig_train, &orig_val, &cfg).unwrap().best;
        let f = fine_tune(&o, &blur_train, &blur_val, &cfg).unwrap().best;
        for (list, suffix, model) in [(&mut original, "orig", o), (&mut tuned, "ft", f)] {
            let checkpoint = d.join(format!("{name}_{suffix}.ckpt"));
            save_checkpoint(&model, &checkpoint).unwrap();
            list.push(EnsembleMember {
                reference: MemberRef {
                    name: format!("{name}_{suffix}"),
                    checkpoint,
                },
                model,
            });
        }
    }
    assert!(original.iter().all(|m| m.model.provenance.trained_on == Some(SubDataset::Original)));
    assert!(tuned.iter().all(|m| m.model.provenance.fine_tuned_on == Some(SubDataset::Blurred)));

    let spec = build_final_ensemble(&original, &tuned, &calibration).unwrap();
    assert_eq!(spec.members.len(), 8);
    assert_eq!(spec.num_classes(), CLASSES);

    let path = d.join("ensemble.json");
    spec.write(&path).unwrap();
    let reread = EnsembleSpec::read(&path).unwrap();
    assert_eq!(reread, spec);
    let ensemble = EnsemblePredictor::load(reread).unwrap();
    for col in ensemble.weights().columns() {
        assert!((col.sum() - 1.0).abs() < 1e-9);
    }
    let report = evaluate(&ensemble, &calibration).unwrap().report;
    assert_eq!(report.evaluated_clips as usize, calibration.len());

    let swapped = build_final_ensemble(&tuned, &original, &calibration);
    assert!(swapped.is_err());
    assert!(build_final_ensemble(&original[..3], &tuned, &calibration).is_err());
}

#[test]
fn evaluation_excludes_missing_clips() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = feature_manifest(dir.path(), "m", 2, 0.2, Variant::Original, 9);
    let model = TrainedModel::new(
        spec("features"),
        ClassifierConfig {
            feature_dim: 4,
            lstm_hidden: 4,
            num_classes: CLASSES,
            n_frames: 4,
            ..ClassifierConfig::default()
        },
        0,
    )
    .unwrap();
    let mut gone = manifest.records[0].clone();
    gone.clip_id = "gone".into();
    gone.path = dir.path().join("gone.pclip");
    manifest = DatasetManifest::new(manifest.records.into_iter().chain([gone]).collect());

    let ev = evaluate(&ModelPredictor::new(&model, "m"), &manifest).unwrap();
    assert_eq!(ev.report.evaluated_clips, 6);
    assert_eq!(ev.report.excluded.len(), 1);
    assert_eq!(ev.report.excluded[0].clip_id, "gone");
    assert_eq!(ev.confusion.total(), 6);
}
