//! Train on original clips, fine-tune on redacted clips, and combine both
//! sets of models with F1-weighted soft voting.
//!
//! `cargo run --release --example fine_tune_ensemble`

use pava::dataset::{calibration_split, split, synth_dataset, DatasetManifest, SynthConfig};
use pava::ensemble::{build_ensemble, EnsembleMember, EnsembleMode, EnsemblePredictor, MemberRef};
use pava::eval::{evaluate, ModelPredictor, Predictor};
use pava::model::{save_checkpoint, ClassifierConfig, FeatureExtractorSpec, TrainedModel};
use pava::privacy::{redact_manifest, BackendConfig, RedactOptions};
use pava::training::{fine_tune, train, TrainConfig};

fn accuracy(p: &dyn Predictor, m: &DatasetManifest) -> pava::Result<f64> {
    Ok(evaluate(p, m)?.report.accuracy_percent)
}

fn main() -> pava::Result<()> {
    let dir = std::env::temp_dir().join("pava-ensemble");
    let _ = std::fs::remove_dir_all(&dir);
    let data = synth_dataset(
        &SynthConfig {
            clips_per_class: 15,
            ..SynthConfig::default()
        },
        dir.join("original"),
    )?;
    let (train_o, test_o) = split(&data, 40, 20, 0, false)?;
    let (train_o, val_o) = calibration_split(&train_o, 0.2, 0)?;
    let blur = |m: &DatasetManifest, name: &str| {
        redact_manifest(m, &BackendConfig::default(), &RedactOptions::default(), dir.join(name)).map(|r| r.manifest)
    };
    let (train_b, val_b, test_b) = (blur(&train_o, "train_b")?, blur(&val_o, "val_b")?, blur(&test_o, "test_b")?);

    let cfg = TrainConfig::default();
    let variants = [("plain", false), ("attention", true)];
    let mut members = Vec::new();
    for (name, attention) in variants {
        let config = ClassifierConfig {
            attention,
            ..ClassifierConfig::desk(4)
        };
        let model = TrainedModel::new(FeatureExtractorSpec::tiny_test_backbone((32, 32)), config, 0)?;
        let original = train(model, &train_o, &val_o, &cfg)?.best;
        let tuned = fine_tune(&original, &train_b, &val_b, &cfg)?.best;
        for (suffix, model) in [("orig", original), ("ft", tuned)] {
            let name = format!("{name}_{suffix}");
            let checkpoint = dir.join(format!("{name}.ckpt"));
            save_checkpoint(&model, &checkpoint)?;
            println!(
                "{name:<16} original test {:5.1}%  blurred test {:5.1}%",
                accuracy(&ModelPredictor::new(&model, &name), &test_o)?,
                accuracy(&ModelPredictor::new(&model, &name), &test_b)?
            );
            members.push(EnsembleMember {
                reference: MemberRef { name, checkpoint },
                model,
            });
        }
    }

    let calibration = val_o.records.iter().chain(&val_b.records).cloned().collect();
    let spec = build_ensemble(&members, &DatasetManifest::new(calibration), EnsembleMode::SoftF1Weighted)?;
    spec.write(dir.join("ensemble.json"))?;
    let ensemble = EnsemblePredictor::new(spec, members.into_iter().map(|m| m.model).collect())?;
    for (name, w) in ensemble.spec().members.iter().zip(ensemble.weights().rows()) {
        println!("weights {:<16} {:.3?}", name.name, w.to_vec());
    }
    println!(
        "ensemble         original test {:5.1}%  blurred test {:5.1}%",
        accuracy(&ensemble, &test_o)?,
        accuracy(&ensemble, &test_b)?
    );
    Ok(())
}
