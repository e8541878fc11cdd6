//! Class-balanced batch plans on a skewed manifest.
//!
//! `cargo run --example balanced_batches`

use pava::dataset::{ClipRecord, DatasetManifest, Split, Variant};
use pava::training::balanced_batches;
use pava::ActivityLabel;

fn main() -> pava::Result<()> {
    let sizes = [1, 3, 12, 40];
    let records = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            (0..n).map(move |k| ClipRecord {
                clip_id: format!("{}-{k:03}", ActivityLabel::from_index(c).unwrap()),
                path: format!("clips/{c}-{k}.pclip").into(),
                label: ActivityLabel::from_index(c).unwrap(),
                subject_id: "s0".into(),
                split: Split::Train,
                variant: Variant::Original,
            })
        })
        .collect();
    let manifest = DatasetManifest::new(records);
    println!("class sizes {:?}", manifest.class_histogram());

    for epoch in 0..2 {
        let plan = balanced_batches(&manifest, sizes.len(), 2, epoch)?;
        println!("epoch {epoch}: {} batches", plan.batches.len());
        for (b, ids) in plan.clip_ids(&manifest).iter().enumerate().take(3) {
            println!("  batch {b}: {:?} -> {}", plan.composition(&manifest, b), ids.join(" "));
        }
    }
    Ok(())
}
