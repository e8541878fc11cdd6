//! Redacts one synthetic clip with the fake detector and reports which
//! pixels changed.
//!
//! `cargo run --example redact_clip`

use pava::dataset::{synth_dataset, SynthConfig};
use pava::privacy::{anomaly_frame_count, redact_clip, FakeDetector, RedactOptions};
use pava::video::{read_clip, write_clip};

fn main() -> pava::Result<()> {
    let dir = std::env::temp_dir().join("pava-redact");
    let cfg = SynthConfig {
        classes: 2,
        clips_per_class: 1,
        ..SynthConfig::default()
    };
    let manifest = synth_dataset(&cfg, dir.join("original"))?;
    let rec = &manifest.records[0];
    let seq = read_clip(&rec.path)?;
    let detector = FakeDetector::for_clip(&rec.path, "tv")?;
    let opts = RedactOptions::default();
    let red = redact_clip(&seq, &detector, &opts)?;

    for t in [0, seq.len() / 2, seq.len() - 1] {
        let (a, b) = (seq.frame(t), red.frames.frame(t));
        let changed = a.data().chunks(3).zip(b.data().chunks(3)).filter(|(x, y)| x != y).count();
        println!("frame {t:>2}: {changed} of {} pixels blurred", a.height() * a.width());
    }
    for (class, present) in &red.presence.per_class {
        let n = present.iter().filter(|&&p| p).count();
        println!("class {class}: detected in {n}/{} frames", red.presence.frames);
    }
    let report = anomaly_frame_count(&red.presence, 20, 5)?;
    println!("anomaly frame count at th=5: {}", report.anomaly_frame_count);

    let out = dir.join(format!("{}-blurred.pclip", rec.clip_id));
    write_clip(&out, &red.frames)?;
    println!("wrote {}", out.display());
    Ok(())
}
