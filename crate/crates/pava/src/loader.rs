//! Turns manifest records into model inputs: decode (cached), sample,
//! gamma-correct, flip, resize and normalize for frame backbones; read and
//! sample `.feat` sidecars for precomputed ones.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Axis};

use crate::error::Result;
use crate::model::{feature_path_for, read_features, BackboneKind, ClipInput, TrainedModel};
use crate::preprocess::{sample_indices, ClipPreparation, Padding, SampleSpec};
use crate::seed;
use crate::video::{read_clip, FrameSequence};

enum RawClip {
    Frames(FrameSequence),
    Features(Array2<f64>),
}

pub struct ClipLoader {
    preparation: ClipPreparation,
    kind: BackboneKind,
    cache: Option<Mutex<HashMap<PathBuf, Arc<RawClip>>>>,
}

/// Frame-sampling seed used at evaluation time; depends only on the clip id.
pub fn eval_sample_seed(clip_id: &str) -> u64 {
    let fnv = clip_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    seed::derive_seed(0, &[seed::STREAM_EVAL, fnv])
}

impl ClipLoader {
    /// With `cache`, decoded clips are kept in memory for the loader's lifetime.
    pub fn for_model(model: &TrainedModel, cache: bool) -> Self {
        Self {
            preparation: model.preparation(),
            kind: model.spec.kind(),
            cache: cache.then(|| Mutex::new(HashMap::new())),
        }
    }

    fn raw(&self, path: &Path) -> Result<Arc<RawClip>> {
        if let Some(c) = &self.cache {
            if let Some(hit) = c.lock().unwrap().get(path) {
                return Ok(hit.clone());
            }
        }
        let raw = Arc::new(match self.kind {
            BackboneKind::Tiny => RawClip::Frames(read_clip(path)?),
            BackboneKind::Precomputed => RawClip::Features(read_features(feature_path_for(path))?),
        });
        if let Some(c) = &self.cache {
            c.lock().unwrap().insert(path.to_path_buf(), raw.clone());
        }
        Ok(raw)
    }

    /// Model input for the clip at `path`. Flipping has no effect on
    /// precomputed features.
    pub fn load(&self, path: &Path, sample_seed: u64, flip: bool) -> Result<ClipInput> {
        match &*self.raw(path)? {
            RawClip::Frames(seq) => Ok(ClipInput::Frames(self.preparation.prepare(seq, sample_seed, flip)?)),
            RawClip::Features(f) => {
                let spec = SampleSpec {
                    n_frames: self.preparation.n_frames,
                    seed: sample_seed,
                    padding: Padding::RepeatLast,
                };
                let idx = sample_indices(f.nrows(), &spec)?;
                Ok(ClipInput::Features(f.select(Axis(0), &idx)))
            }
        }
    }

    pub fn load_eval(&self, path: &Path, clip_id: &str) -> Result<ClipInput> {
        self.load(path, eval_sample_seed(clip_id), false)
    }
}
