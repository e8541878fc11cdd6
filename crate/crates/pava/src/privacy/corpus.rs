use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{aggregate_anomalies, anomaly_frame_count, open_detector, redact_clip, BackendConfig, PresenceSeries, RedactOptions};
use crate::dataset::{mask_path_for, ClipRecord, DatasetManifest, Variant};
use crate::error::{Error, Result};
use crate::video::{read_clip, write_clip, CLIP_EXTENSION};

#[derive(Clone, Debug)]
pub struct RedactedClip {
    pub clip_id: String,
    pub presence: PresenceSeries,
    pub failed_frames: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RedactedDataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<RedactedClip>,
}

/// File stem for a clip id: anything outside `[A-Za-z0-9._-]` becomes `_`.
pub fn clip_file_stem(clip_id: &str) -> String {
    clip_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

/// Redacts every clip into `out_dir/clips/<clip_id>.pclip` and writes
/// `out_dir/manifest.jsonl` with variant `blurred`. Ground-truth mask tracks
/// are copied next to the redacted clips when present.
pub fn redact_manifest_with_progress(
    manifest: &DatasetManifest,
    backend: &BackendConfig,
    opts: &RedactOptions,
    out_dir: impl AsRef<Path>,
    on_clip: &mut dyn FnMut(usize, &RedactedClip),
) -> Result<RedactedDataset> {
    let out_dir = out_dir.as_ref();
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(Error::io(&clips_dir))?;
    let mut records = Vec::with_capacity(manifest.len());
    let mut clips = Vec::with_capacity(manifest.len());
    for (i, rec) in manifest.records.iter().enumerate() {
        let seq = read_clip(&rec.path)?;
        let detector = open_detector(backend, &rec.path)?;
        let red = redact_clip(&seq, detector.as_ref(), opts)?;
        let path = clips_dir.join(format!("{}.{CLIP_EXTENSION}", clip_file_stem(&rec.clip_id)));
        write_clip(&path, &red.frames)?;
        let truth = mask_path_for(&rec.path);
        if truth.exists() {
            let dst = mask_path_for(&path);
            std::fs::copy(&truth, &dst).map_err(Error::io(&dst))?;
        }
        records.push(ClipRecord {
            path,
            variant: Variant::Blurred,
            ..rec.clone()
        });
        let clip = RedactedClip {
            clip_id: rec.clip_id.clone(),
            presence: red.presence,
            failed_frames: red.failed_frames,
        };
        on_clip(i, &clip);
        clips.push(clip);
    }
    let manifest = DatasetManifest::new(records);
    manifest.write_jsonl(out_dir.join("manifest.jsonl"))?;
    Ok(RedactedDataset { manifest, clips })
}

pub fn redact_manifest(
    manifest: &DatasetManifest,
    backend: &BackendConfig,
    opts: &RedactOptions,
    out_dir: impl AsRef<Path>,
) -> Result<RedactedDataset> {
    redact_manifest_with_progress(manifest, backend, opts, out_dir, &mut |_, _| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySummary {
    pub threshold: usize,
    pub window: usize,
    pub anomaly_frame_count: usize,
    pub total_frames: usize,
    pub accuracy_percent: f64,
}

/// Dataset-level Anomaly Frame Count for each threshold.
pub fn summarize_anomalies(presence: &[&PresenceSeries], window: usize, thresholds: &[usize]) -> Result<Vec<AnomalySummary>> {
    thresholds
        .iter()
        .map(|&th| {
            let reports = presence
                .iter()
                .map(|p| anomaly_frame_count(p, window, th))
                .collect::<Result<Vec<_>>>()?;
            let (count, total, pct) = aggregate_anomalies(&reports);
            Ok(AnomalySummary {
                threshold: th,
                window,
                anomaly_frame_count: count,
                total_frames: total,
                accuracy_percent: pct,
            })
        })
        .collect()
}
