//! Brightness correction, frame sampling, mirroring and the full clip
//! preparation applied before the network.
//!
//! `cargo run --example preprocess`

use pava::dataset::{synth_dataset, SynthConfig};
use pava::model::{ClassifierConfig, FeatureExtractorSpec, TrainedModel};
use pava::preprocess::{apply_gamma, estimate_gamma, flip_decision, sample_indices, GammaParams, SampleSpec};
use pava::video::read_clip;

fn main() -> pava::Result<()> {
    let dir = std::env::temp_dir().join("pava-preprocess");
    let cfg = SynthConfig {
        classes: 2,
        clips_per_class: 1,
        ..SynthConfig::default()
    };
    let manifest = synth_dataset(&cfg, &dir)?;
    let seq = read_clip(&manifest.records[0].path)?;

    let mean = seq.frame(0).mean();
    let gamma = estimate_gamma(mean, 0.5)?;
    let corrected = apply_gamma(&seq, GammaParams::new(gamma, 0.5)?);
    println!("first frame mean {mean:.3}, gamma {gamma:.3}, corrected mean {:.3}", corrected.frame(0).mean());

    for seed in 0..3 {
        let spec = SampleSpec {
            n_frames: 8,
            seed,
            ..SampleSpec::default()
        };
        println!("seed {seed}: frames {:?}", sample_indices(seq.len(), &spec)?);
    }
    let short = SampleSpec {
        n_frames: 8,
        ..SampleSpec::default()
    };
    println!("5-frame clip padded: {:?}", sample_indices(5, &short)?);

    let flips = (0..1000).filter(|&s| flip_decision(0.5, s)).count();
    println!("flip decisions at p=0.5: {flips}/1000");

    let model = TrainedModel::new(FeatureExtractorSpec::tiny_test_backbone((16, 16)), ClassifierConfig::desk(2), 0)?;
    let prepared = model.preparation().prepare(&seq, 7, false)?;
    println!(
        "prepared clip: {} frames of {}x{}, channel-0 mean {:.3}",
        prepared.len(),
        prepared.height(),
        prepared.width(),
        prepared.frames().iter().map(|f| f.get(0, 0, 0)).sum::<f64>() / prepared.len() as f64
    );
    Ok(())
}
