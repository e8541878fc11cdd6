//! Trains the classifier on the synthetic four-class dataset with the
//! in-repo backbone and reports held-out accuracy.
//!
//! `cargo run --release --example desk_training [seed]`

use pava::dataset::{calibration_split, split, synth_dataset, SynthConfig};
use pava::loader::ClipLoader;
use pava::model::{ClassifierConfig, FeatureExtractorSpec, TrainedModel};
use pava::training::{train_with_progress, validation_metrics, TrainConfig};

fn main() -> pava::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let dir = tempfile::tempdir().map_err(pava::Error::io("tempdir"))?;
    let data = synth_dataset(&SynthConfig { seed, ..SynthConfig::default() }, dir.path())?;
    let (train, test) = split(&data, 30, 10, seed, false)?;
    let (train, val) = calibration_split(&train, 0.2, seed)?;

    let model = TrainedModel::new(
        FeatureExtractorSpec::tiny_test_backbone((32, 32)),
        ClassifierConfig::desk(4),
        seed,
    )?;
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let out = train_with_progress(model, &train, &val, &cfg, &mut |r| {
        println!(
            "epoch={} train_loss={:.4} val_loss={:.4} val_acc={:.3} lr={}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr
        )
    })?;
    let loader = ClipLoader::for_model(&out.best, false);
    let (loss, acc) = validation_metrics(&out.best, &loader, &test)?;
    println!("best_epoch={:?} test_loss={loss:.4} test_accuracy={:.1}%", out.best_epoch, acc * 100.0);
    Ok(())
}
