//! Trains a classifier on `.feat` sidecars instead of decoding frames.
//!
//! The sidecars here come from the in-repo backbone; features from any
//! external extractor work the same way as long as they are `T × D`.
//!
//! `cargo run --release --example precomputed_features`

use pava::dataset::{calibration_split, split, synth_dataset, SynthConfig};
use pava::eval::{evaluate, ModelPredictor};
use pava::model::{feature_path_for, read_features, write_features, ClassifierConfig, ClipInput, FeatureExtractorSpec, TinyBackbone, TrainedModel};
use pava::preprocess::{ClipPreparation, Normalization};
use pava::training::{train, TrainConfig};
use pava::video::read_clip;

fn main() -> pava::Result<()> {
    let dir = fresh_dir("pava-features");
    let data = synth_dataset(&SynthConfig::default(), &dir)?;

    let extractor = TrainedModel::new(FeatureExtractorSpec::tiny_test_backbone((32, 32)), ClassifierConfig::desk(4), 0)?;
    for rec in &data.records {
        let seq = read_clip(&rec.path)?;
        let prep = ClipPreparation {
            n_frames: seq.len(),
            ..extractor.preparation()
        };
        let frames = prep.prepare(&seq, 0, false)?;
        let raw = extractor.raw_features(&ClipInput::Frames(frames))?;
        write_features(feature_path_for(&rec.path), &raw)?;
    }
    let example = read_features(feature_path_for(&data.records[0].path))?;
    println!("wrote {} sidecars of {}x{}", data.len(), example.nrows(), example.ncols());

    let spec = FeatureExtractorSpec {
        name: "sidecar".into(),
        input_resolution: (32, 32),
        raw_feature_dim: TinyBackbone::FEATURE_DIM,
        frozen: true,
        normalization: Normalization::IDENTITY,
    };
    let (train_set, test_set) = split(&data, 30, 10, 0, false)?;
    let (train_set, val_set) = calibration_split(&train_set, 0.2, 0)?;
    let model = TrainedModel::new(spec, ClassifierConfig::desk(4), 0)?;
    let out = train(model, &train_set, &val_set, &TrainConfig::default())?;
    let last = out.history.last().unwrap();
    println!("final train loss {:.4}, val acc {:.3}", last.train_loss, last.val_acc);
    let acc = evaluate(&ModelPredictor::new(&out.best, "sidecar"), &test_set)?.report.accuracy_percent;
    println!("held-out accuracy {acc:.1}%");
    Ok(())
}

fn fresh_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}
