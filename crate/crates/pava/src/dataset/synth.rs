//! Synthetic desk-scale clips.
//!
//! Each clip shows a red checkered patch translating across a static gray
//! background. The translation direction encodes the class: class `c` of `C`
//! moves along the angle `2π(c + ½)/C`, so with four classes the directions are
//! the four diagonals and every class has a distinct `(sign dx, sign dy)`.
//! A striped "screen" rectangle is planted at a random static position and its
//! ground-truth mask is written next to the clip as a `PAVA-MASK v1` track.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, DatasetManifest, Split, Variant};
use crate::error::{Error, Result};
use crate::labels::ActivityLabel;
use crate::mask::{Mask, MaskTrack, MASK_EXTENSION};
use crate::seed::{self, STREAM_SYNTH};
use crate::video::{write_clip, Frame, FrameSequence, CLIP_EXTENSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitiveRegionSpec {
    pub width_frac: f64,
    pub height_frac: f64,
    /// Backend vocabulary label the fake detector reports for the region.
    pub backend_label: String,
}

impl Default for SensitiveRegionSpec {
    fn default() -> Self {
        Self {
            width_frac: 0.4,
            height_frac: 0.4,
            backend_label: "tv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub subjects: usize,
    pub sensitive: SensitiveRegionSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            clips_per_class: 10,
            frames: 32,
            height: 32,
            width: 32,
            fps: 30.0,
            subjects: 5,
            sensitive: SensitiveRegionSpec::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > ActivityLabel::COUNT {
            return Err(Error::InvalidArgument(format!(
                "classes must be in 2..={}, got {}",
                ActivityLabel::COUNT,
                self.classes
            )));
        }
        if self.frames < 1 {
            return Err(Error::InvalidArgument("frames must be at least 1".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument("resolution must be at least 8x8".into()));
        }
        let s = &self.sensitive;
        if !(0.0..=1.0).contains(&s.width_frac) || !(0.0..=1.0).contains(&s.height_frac) {
            return Err(Error::InvalidArgument("sensitive region fractions must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn patch_size(&self) -> usize {
        (self.height.min(self.width) / 5).max(3)
    }
}

/// Unit direction of class `class` out of `classes`.
pub fn motion_direction(class: usize, classes: usize) -> (f64, f64) {
    let theta = 2.0 * PI * (class as f64 + 0.5) / classes as f64;
    (theta.cos(), theta.sin())
}

pub(crate) struct RenderedClip {
    pub frames: FrameSequence,
    pub masks: MaskTrack,
}

pub(crate) fn render_clip(cfg: &SynthConfig, class: usize, k: usize) -> RenderedClip {
    let (h, w, t_len) = (cfg.height, cfg.width, cfg.frames);
    let mut rng = seed::rng(cfg.seed, &[STREAM_SYNTH, class as u64, k as u64]);

    let base: f64 = rng.random_range(0.35..0.55);
    let background: Vec<f64> = (0..h * w).map(|_| base + rng.random_range(-0.06..0.06)).collect();

    let sw = ((cfg.sensitive.width_frac * w as f64).round() as usize).min(w);
    let sh = ((cfg.sensitive.height_frac * h as f64).round() as usize).min(h);
    let sx = rng.random_range(0..=w - sw);
    let sy = rng.random_range(0..=h - sh);
    let stripe_phase = rng.random_range(0..2usize);
    let region = Mask::rect(h, w, sx, sy, sx + sw, sy + sh);

    let p = cfg.patch_size();
    let bright = [rng.random_range(0.85..1.0), rng.random_range(0.0..0.1), rng.random_range(0.0..0.1)];
    let dark = [rng.random_range(0.6..0.7), rng.random_range(0.0..0.05), rng.random_range(0.0..0.05)];

    let (ux, uy) = motion_direction(class, cfg.classes);
    let travel = 0.45 * (h.min(w) - p) as f64;
    let (dx, dy) = (ux * travel, uy * travel);
    let span_x = (w - p) as f64;
    let span_y = (h - p) as f64;
    // The patch starts near the frame center and moves outward.
    let start = |span: f64, d: f64, jitter: f64| {
        let lo = (-d).max(0.0);
        let hi = (span - d.max(0.0)).max(lo);
        (0.5 * span + jitter).clamp(lo, hi)
    };
    let jitter = 0.1 * h.min(w) as f64;
    let x0 = start(span_x, dx, rng.random_range(-jitter..=jitter));
    let y0 = start(span_y, dy, rng.random_range(-jitter..=jitter));

    let mut frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let progress = if t_len > 1 { t as f64 / (t_len - 1) as f64 } else { 0.0 };
        let px = (x0 + dx * progress).round().clamp(0.0, span_x) as usize;
        let py = (y0 + dy * progress).round().clamp(0.0, span_y) as usize;
        let mut data = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let mut rgb = [background[y * w + x]; 3];
                if region.get(y, x) {
                    let v = if (y + stripe_phase) % 2 == 0 { 0.6 } else { 0.4 };
                    rgb = [v; 3];
                }
                if x >= px && x < px + p && y >= py && y < py + p {
                    let cell = ((x - px) / 2 + (y - py) / 2).is_multiple_of(2);
                    rgb = if cell { bright } else { dark };
                }
                for c in 0..3 {
                    let noisy = rgb[c] + rng.random_range(-0.02..0.02);
                    data[(y * w + x) * 3 + c] = noisy.clamp(0.0, 1.0);
                }
            }
        }
        frames.push(Frame::new(h, w, data).expect("frame size"));
    }
    RenderedClip {
        frames: FrameSequence::new(frames, cfg.fps).expect("uniform frames"),
        masks: MaskTrack {
            height: h,
            width: w,
            masks: vec![region; t_len],
        },
    }
}

pub fn clip_id(label: ActivityLabel, k: usize) -> String {
    format!("{}-{k:03}", label.name())
}

/// Path of the ground-truth mask track that accompanies `clip_path`.
pub fn mask_path_for(clip_path: &Path) -> PathBuf {
    clip_path.with_extension(MASK_EXTENSION)
}

/// Writes `clips/<id>.pclip`, `clips/<id>.mask` and `manifest.jsonl` under `out_dir`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(Error::io(&clips_dir))?;

    let jobs: Vec<(usize, usize)> = (0..cfg.classes)
        .flat_map(|c| (0..cfg.clips_per_class).map(move |k| (c, k)))
        .collect();
    let mut records = jobs
        .par_iter()
        .map(|&(class, k)| {
            let label = ActivityLabel::from_index(class).unwrap();
            let id = clip_id(label, k);
            let path = clips_dir.join(format!("{id}.{CLIP_EXTENSION}"));
            let rendered = render_clip(cfg, class, k);
            write_clip(&path, &rendered.frames)?;
            rendered.masks.write(mask_path_for(&path))?;
            Ok(ClipRecord {
                clip_id: id,
                path,
                label,
                subject_id: format!("subject{}", k % cfg.subjects.max(1)),
                split: Split::Train,
                variant: Variant::Original,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let manifest = DatasetManifest::new(records);
    manifest.write_jsonl(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::read_clip;

    fn small() -> SynthConfig {
        SynthConfig {
            clips_per_class: 3,
            frames: 12,
            ..SynthConfig::default()
        }
    }

    /// Mean frame-to-frame displacement of the red patch, located by the
    /// centroid of pixels whose red channel exceeds green by more than 0.4.
    fn mean_displacement(seq: &FrameSequence) -> (f64, f64) {
        let centroids: Vec<(f64, f64)> = seq
            .frames()
            .iter()
            .map(|f| {
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for y in 0..f.height() {
                    for x in 0..f.width() {
                        if f.get(y, x, 0) - f.get(y, x, 1) > 0.4 {
                            sx += x as f64;
                            sy += y as f64;
                            n += 1.0;
                        }
                    }
                }
                (sx / n, sy / n)
            })
            .collect();
        let steps = (centroids.len() - 1) as f64;
        let (first, last) = (centroids[0], centroids[centroids.len() - 1]);
        ((last.0 - first.0) / steps, (last.1 - first.1) / steps)
    }

    #[test]
    fn writes_clips_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            clips_per_class: 10,
            frames: 32,
            ..SynthConfig::default()
        };
        let m = synth_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.len(), 40);
        let clips = std::fs::read_dir(dir.path().join("clips")).unwrap().count();
        assert_eq!(clips, 80);
        assert_eq!(&m.class_histogram()[..4], &[10, 10, 10, 10]);
        assert!(m.class_histogram()[4..].iter().all(|&c| c == 0));
        let track = MaskTrack::read(mask_path_for(&m.records[0].path)).unwrap();
        assert_eq!(track.masks.len(), 32);
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_dataset(&small(), a.path()).unwrap();
        synth_dataset(&small(), b.path()).unwrap();
        for name in ["manifest.jsonl", "clips/walk-000.pclip", "clips/chat-002.pclip", "clips/dryer-001.mask"] {
            let pa = a.path().join(name);
            if name.contains("walk") {
                assert!(!pa.exists());
                continue;
            }
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
        }
    }

    #[test]
    fn class_motifs_have_distinct_displacement_signs() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(&small(), dir.path()).unwrap();
        let mut signs = std::collections::BTreeMap::new();
        for r in &m.records {
            let (dx, dy) = mean_displacement(&read_clip(&r.path).unwrap());
            let sign = (dx > 0.0, dy > 0.0);
            assert!(dx.abs() > 0.1 && dy.abs() > 0.1, "{}: ({dx}, {dy})", r.clip_id);
            let prev = signs.insert(r.label, sign);
            assert!(prev.is_none() || prev == Some(sign), "class {} inconsistent", r.label);
        }
        let distinct: std::collections::BTreeSet<_> = signs.values().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn rejects_degenerate_configs() {
        let dir = tempfile::tempdir().unwrap();
        let one_class = SynthConfig { classes: 1, ..small() };
        assert!(synth_dataset(&one_class, dir.path()).is_err());
        let no_frames = SynthConfig { frames: 0, ..small() };
        assert!(synth_dataset(&no_frames, dir.path()).is_err());
    }
}
