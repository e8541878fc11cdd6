//! Generates the synthetic activity corpus and summarizes what was written.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use pava::dataset::{mask_path_for, synth_dataset, SynthConfig};
use pava::mask::MaskTrack;
use pava::video::read_clip;

fn main() -> pava::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("pava-synth"));
    let cfg = SynthConfig::default();
    let manifest = synth_dataset(&cfg, &out)?;
    println!("wrote {} clips to {}", manifest.len(), out.display());
    println!("clips per class: {:?}", manifest.class_histogram());

    let first = &manifest.records[0];
    let clip = read_clip(&first.path)?;
    let track = MaskTrack::read(mask_path_for(&first.path))?;
    let covered: usize = track.masks.iter().map(|m| m.count()).sum();
    println!(
        "{}: label {}, subject {}, {} frames of {}x{}, mean brightness {:.3}",
        first.clip_id,
        first.label,
        first.subject_id,
        clip.len(),
        clip.height(),
        clip.width(),
        clip.frame(0).mean()
    );
    println!(
        "sensitive region covers {:.1}% of pixels on average",
        100.0 * covered as f64 / (track.masks.len() * clip.height() * clip.width()) as f64
    );
    Ok(())
}
