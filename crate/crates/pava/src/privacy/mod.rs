//! Sensitive-object redaction.
//!
//! A pluggable [`Detector`] proposes instance masks per frame; detections are
//! filtered down to the seven sensitive classes, merged and dilated, and the
//! frame is blurred through the merged mask. [`anomaly_frame_count`] scores
//! the temporal continuity of a detector's per-frame presence output.

mod anomaly;
pub mod blur;
mod corpus;
pub mod detect;
mod redact;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BBox, Mask};

pub use anomaly::{aggregate_anomalies, anomaly_frame_count, AnomalyReport};
pub use blur::{blur_masked, gaussian_blur, gaussian_kernel, BlurParams};
pub use detect::{
    open_detector, BackendConfig, BackendKind, ChannelOrder, DetectionFile, Detector, ExternalCommandConfig,
    FakeDetector, FileDetector,
};
pub use corpus::{
    clip_file_stem, redact_manifest, redact_manifest_with_progress, summarize_anomalies, AnomalySummary, RedactedClip,
    RedactedDataset,
};
pub use redact::{redact_clip, PresenceSeries, RedactOptions, Redaction};

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceDetection {
    pub class_name: String,
    pub confidence: f64,
    pub mask: Mask,
    /// Tight box of `mask`; `(0, 0, 0, 0)` for an empty mask.
    pub bbox: BBox,
}

impl InstanceDetection {
    pub fn new(class_name: impl Into<String>, confidence: f64, mask: Mask) -> Self {
        let bbox = mask.bbox().unwrap_or((0, 0, 0, 0));
        Self {
            class_name: class_name.into(),
            confidence,
            mask,
            bbox,
        }
    }
}

/// The seven logical sensitive classes and their backend vocabulary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitiveClassSet {
    pub backend_map: BTreeMap<String, Vec<String>>,
    pub confidence_threshold: f64,
}

pub const SENSITIVE_CLASSES: [&str; 7] = [
    "digital screen",
    "laptop",
    "mobile",
    "book",
    "person",
    "keyboard",
    "toilet/urinal",
];

impl Default for SensitiveClassSet {
    /// Mapping onto COCO category names, the vocabulary of the pretrained
    /// instance-segmentation models.
    fn default() -> Self {
        let coco: [(&str, &[&str]); 7] = [
            ("digital screen", &["tv"]),
            ("laptop", &["laptop"]),
            ("mobile", &["cell phone"]),
            ("book", &["book"]),
            ("person", &["person"]),
            ("keyboard", &["keyboard"]),
            ("toilet/urinal", &["toilet"]),
        ];
        Self {
            backend_map: coco
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
            confidence_threshold: 0.5,
        }
    }
}

impl SensitiveClassSet {
    pub fn validate(&self) -> Result<()> {
        if self.backend_map.len() != 7 {
            return Err(Error::Config(format!(
                "sensitive class set needs exactly 7 names, got {}",
                self.backend_map.len()
            )));
        }
        if let Some((name, _)) = self.backend_map.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("sensitive class `{name}` has no backend label")));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence threshold {} not in [0, 1]",
                self.confidence_threshold
            )));
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.backend_map.keys().map(String::as_str)
    }

    /// Logical name for a backend label, if it is sensitive.
    pub fn logical_name(&self, backend_label: &str) -> Option<&str> {
        self.backend_map
            .iter()
            .find(|(_, labels)| labels.iter().any(|l| l == backend_label))
            .map(|(name, _)| name.as_str())
    }
}

/// Keeps sensitive detections at or above the threshold, renamed to their
/// logical class.
pub fn filter_sensitive(detections: &[InstanceDetection], set: &SensitiveClassSet) -> Vec<InstanceDetection> {
    detections
        .iter()
        .filter(|d| d.confidence >= set.confidence_threshold)
        .filter_map(|d| {
            set.logical_name(&d.class_name).map(|name| InstanceDetection {
                class_name: name.to_string(),
                ..d.clone()
            })
        })
        .collect()
}

/// Union of all detection masks, dilated by `dilation` pixels.
pub fn merge_masks(
    detections: &[InstanceDetection],
    dilation: usize,
    height: usize,
    width: usize,
) -> Result<Mask> {
    let mut merged = Mask::empty(height, width);
    for d in detections {
        merged.union_with(&d.mask)?;
    }
    Ok(merged.dilate(dilation))
}
