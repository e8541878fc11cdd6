use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{blur_masked, filter_sensitive, merge_masks, BlurParams, Detector, SensitiveClassSet};
use crate::error::{Error, Result};
use crate::video::{Frame, FrameSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RedactOptions {
    pub classes: SensitiveClassSet,
    pub blur: BlurParams,
    /// Pass frames through unblurred when the detector fails on them.
    /// Off by default: a detector failure aborts the clip.
    pub fail_open: bool,
}


/// Per sensitive class, whether it was detected in each frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresenceSeries {
    pub frames: usize,
    pub per_class: BTreeMap<String, Vec<bool>>,
}

impl PresenceSeries {
    pub fn new(frames: usize, classes: impl IntoIterator<Item = String>) -> Self {
        Self {
            frames,
            per_class: classes.into_iter().map(|c| (c, vec![false; frames])).collect(),
        }
    }

    pub fn from_vectors(per_class: BTreeMap<String, Vec<bool>>) -> Result<Self> {
        let frames = per_class.values().next().map_or(0, Vec::len);
        if per_class.values().any(|v| v.len() != frames) {
            return Err(Error::Shape("presence vectors differ in length".into()));
        }
        Ok(Self { frames, per_class })
    }
}

#[derive(Clone, Debug)]
pub struct Redaction {
    pub frames: FrameSequence,
    pub presence: PresenceSeries,
    /// Frames the detector failed on (only non-empty with `fail_open`).
    pub failed_frames: Vec<usize>,
}

struct FrameOutcome {
    frame: Frame,
    present: Vec<String>,
    failed: bool,
}

fn redact_frame(
    frame: &Frame,
    t: usize,
    detector: &dyn Detector,
    opts: &RedactOptions,
) -> Result<FrameOutcome> {
    let detections = match detector.detect(frame, t) {
        Ok(d) => d,
        Err(_) if opts.fail_open => {
            return Ok(FrameOutcome {
                frame: frame.clone(),
                present: Vec::new(),
                failed: true,
            });
        }
        Err(e @ Error::Detector { .. }) => return Err(e),
        Err(e) => {
            return Err(Error::Detector {
                frame: t,
                reason: e.to_string(),
            })
        }
    };
    let sensitive = filter_sensitive(&detections, &opts.classes);
    let mask = merge_masks(&sensitive, opts.blur.mask_dilation, frame.height(), frame.width())?;
    Ok(FrameOutcome {
        frame: blur_masked(frame, &mask, &opts.blur)?,
        present: sensitive.into_iter().map(|d| d.class_name).collect(),
        failed: false,
    })
}

/// Detect → filter → merge → blur on every frame, recording class presence.
pub fn redact_clip(seq: &FrameSequence, detector: &dyn Detector, opts: &RedactOptions) -> Result<Redaction> {
    opts.classes.validate()?;
    opts.blur.validate()?;
    let work = |(t, f): (usize, &Frame)| redact_frame(f, t, detector, opts);
    let outcomes: Vec<FrameOutcome> = if detector.shareable() {
        seq.frames().par_iter().enumerate().map(work).collect::<Result<_>>()?
    } else {
        seq.frames().iter().enumerate().map(work).collect::<Result<_>>()?
    };

    let mut presence = PresenceSeries::new(seq.len(), opts.classes.names().map(String::from));
    let mut frames = Vec::with_capacity(outcomes.len());
    let mut failed_frames = Vec::new();
    for (t, o) in outcomes.into_iter().enumerate() {
        for name in &o.present {
            if let Some(v) = presence.per_class.get_mut(name) {
                v[t] = true;
            }
        }
        if o.failed {
            failed_frames.push(t);
        }
        frames.push(o.frame);
    }
    Ok(Redaction {
        frames: FrameSequence::new(frames, seq.source_fps())?,
        presence,
        failed_frames,
    })
}
