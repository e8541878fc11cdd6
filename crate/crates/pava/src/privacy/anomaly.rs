//! Anomaly Frame Count: frames inside implausibly short detection gaps.
//!
//! For each class, a *gap* is a maximal run of frames where the class is
//! absent, bounded on both sides by frames where it is present. A gap shorter
//! than the threshold `th` (and no longer than the window) cannot be a real
//! disappearance, so every frame in it is flagged. A frame counts once even if
//! several classes flag it. The reported percentage is
//! `100 · anomalous frames / total frames` (lower is better).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PresenceSeries;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub anomalous_frames: BTreeMap<String, Vec<bool>>,
    pub anomaly_frame_count: usize,
    pub total_frames: usize,
    pub accuracy_percent: f64,
}

fn flag_gaps(present: &[bool], window: usize, threshold: usize) -> Vec<bool> {
    let mut flags = vec![false; present.len()];
    let mut last_true: Option<usize> = None;
    for (t, &p) in present.iter().enumerate() {
        if p {
            if let Some(prev) = last_true {
                let gap = t - prev - 1;
                if gap > 0 && gap < threshold && gap <= window {
                    flags[prev + 1..t].iter_mut().for_each(|f| *f = true);
                }
            }
            last_true = Some(t);
        }
    }
    flags
}

pub fn anomaly_frame_count(presence: &PresenceSeries, window: usize, threshold: usize) -> Result<AnomalyReport> {
    if threshold < 1 {
        return Err(Error::InvalidArgument("anomaly threshold must be at least 1".into()));
    }
    if window < threshold {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be at least the threshold {threshold}"
        )));
    }
    if presence.frames == 0 {
        return Err(Error::InvalidArgument("presence series is empty".into()));
    }
    let anomalous_frames: BTreeMap<String, Vec<bool>> = presence
        .per_class
        .iter()
        .map(|(name, v)| (name.clone(), flag_gaps(v, window, threshold)))
        .collect();
    let count = (0..presence.frames)
        .filter(|&t| anomalous_frames.values().any(|v| v[t]))
        .count();
    Ok(AnomalyReport {
        anomalous_frames,
        anomaly_frame_count: count,
        total_frames: presence.frames,
        accuracy_percent: 100.0 * count as f64 / presence.frames as f64,
    })
}

/// Dataset-level figure: anomalous and total frames summed over clips.
pub fn aggregate_anomalies(reports: &[AnomalyReport]) -> (usize, usize, f64) {
    let count: usize = reports.iter().map(|r| r.anomaly_frame_count).sum();
    let total: usize = reports.iter().map(|r| r.total_frames).sum();
    let pct = if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 };
    (count, total, pct)
}
