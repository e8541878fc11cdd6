//! Brightness normalization, frame sampling, resizing and augmentation.
//!
//! Every operation is a pure function of its inputs and an explicit seed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::video::{Frame, FrameSequence};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub gamma: f64,
    pub target_mean: f64,
}

impl GammaParams {
    pub fn new(gamma: f64, target_mean: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { gamma, target_mean })
    }
}

/// Exponent that maps `mean_brightness` onto `target_mean` under `x ↦ x^γ`.
pub fn estimate_gamma(mean_brightness: f64, target_mean: f64) -> Result<f64> {
    if !(mean_brightness > 0.0 && mean_brightness < 1.0) {
        return Err(Error::DegenerateFrame(mean_brightness));
    }
    if !(target_mean > 0.0 && target_mean < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target mean must lie in (0, 1), got {target_mean}"
        )));
    }
    Ok(target_mean.ln() / mean_brightness.ln())
}

pub fn apply_gamma(seq: &FrameSequence, params: GammaParams) -> FrameSequence {
    if params.gamma == 1.0 {
        return seq.clone();
    }
    seq.map_frames(|f| {
        let mut out = f.clone();
        for v in out.data_mut() {
            *v = v.powf(params.gamma);
        }
        out
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    RepeatLast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n_frames: usize,
    pub seed: u64,
    pub padding: Padding,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            n_frames: 40,
            seed: 0,
            padding: Padding::RepeatLast,
        }
    }
}

/// Frame indices for a clip of `total` frames: `n` distinct sorted indices
/// drawn uniformly without replacement, or every frame followed by repeats of
/// the last one when the clip is shorter than `n`.
pub fn sample_indices(total: usize, spec: &SampleSpec) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::InvalidArgument("cannot sample from an empty clip".into()));
    }
    if spec.n_frames == 0 {
        return Err(Error::InvalidArgument("n_frames must be at least 1".into()));
    }
    let n = spec.n_frames;
    if total <= n {
        let mut idx: Vec<usize> = (0..total).collect();
        idx.resize(n, total - 1);
        return Ok(idx);
    }
    let mut rng = seed::rng(spec.seed, &[seed::STREAM_SAMPLE]);
    let mut idx = rand::seq::index::sample(&mut rng, total, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn sample_frames(seq: &FrameSequence, spec: &SampleSpec) -> Result<FrameSequence> {
    Ok(seq.select(&sample_indices(seq.len(), spec)?))
}

/// Bilinear resize with half-pixel centers (an identity when sizes match).
pub fn resize_frame(frame: &Frame, out_h: usize, out_w: usize) -> Frame {
    let (in_h, in_w) = (frame.height(), frame.width());
    if in_h == out_h && in_w == out_w {
        return frame.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = frame.get(y0, x0, c) * (1.0 - fx) + frame.get(y0, x1, c) * fx;
                let bottom = frame.get(y1, x0, c) * (1.0 - fx) + frame.get(y1, x1, c) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Frame::new(out_h, out_w, data).expect("resize output shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// ImageNet statistics used by the pretrained backbones.
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("channel std {:?} has a zero component", self.std)));
        }
        Ok(())
    }
}

pub fn resize_normalize(
    seq: &FrameSequence,
    resolution: (usize, usize),
    norm: &Normalization,
) -> Result<FrameSequence> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("resolution {h}x{w} must be positive")));
    }
    norm.validate()?;
    Ok(seq.map_frames(|f| {
        let mut out = resize_frame(f, h, w);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % 3;
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
        out
    }))
}

/// Inverse of the normalization step of [`resize_normalize`].
pub fn denormalize(seq: &FrameSequence, norm: &Normalization) -> FrameSequence {
    seq.map_frames(|f| {
        let mut out = f.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % 3;
            *v = *v * norm.std[c] + norm.mean[c];
        }
        out
    })
}

/// Whether a clip seeded with `seed` is mirrored at flip probability `p`.
pub fn flip_decision(probability: f64, seed: u64) -> bool {
    let mut rng = seed::rng(seed, &[seed::STREAM_FLIP]);
    rng.random_bool(probability.clamp(0.0, 1.0))
}

/// Mirrors the whole clip horizontally with the given probability.
pub fn random_hflip(seq: &FrameSequence, probability: f64, seed: u64) -> Result<FrameSequence> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::InvalidArgument(format!("flip probability {probability} not in [0, 1]")));
    }
    if flip_decision(probability, seed) {
        Ok(seq.map_frames(Frame::flipped_horizontally))
    } else {
        Ok(seq.clone())
    }
}

/// The full per-clip preparation used for training and inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPreparation {
    pub n_frames: usize,
    pub gamma_target: Option<f64>,
    pub resolution: (usize, usize),
    pub normalization: Normalization,
}

impl ClipPreparation {
    /// Sample, gamma-correct (exponent from the first sampled frame), optionally
    /// mirror, then resize and normalize.
    pub fn prepare(&self, clip: &FrameSequence, sample_seed: u64, flip: bool) -> Result<FrameSequence> {
        let spec = SampleSpec {
            n_frames: self.n_frames,
            seed: sample_seed,
            padding: Padding::RepeatLast,
        };
        let sampled = sample_frames(clip, &spec)?;
        self.finish(sampled, flip)
    }

    pub(crate) fn finish(&self, sampled: FrameSequence, flip: bool) -> Result<FrameSequence> {
        let mut seq = sampled;
        if let Some(target) = self.gamma_target {
            // A black or saturated first frame carries no brightness cue.
            if let Ok(gamma) = estimate_gamma(seq.frame(0).mean(), target) {
                seq = apply_gamma(&seq, GammaParams::new(gamma, target)?);
            }
        }
        if flip {
            seq = seq.map_frames(Frame::flipped_horizontally);
        }
        resize_normalize(&seq, self.resolution, &self.normalization)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant_clip(t: usize, h: usize, w: usize, v: f64) -> FrameSequence {
        FrameSequence::new(vec![Frame::filled(h, w, v); t], 30.0).unwrap()
    }

    fn indexed_clip(t: usize) -> FrameSequence {
        let frames = (0..t).map(|k| Frame::filled(1, 1, k as f64 / 1000.0)).collect();
        FrameSequence::new(frames, 30.0).unwrap()
    }

    #[test]
    fn gamma_estimates() {
        assert_eq!(estimate_gamma(0.5, 0.5).unwrap(), 1.0);
        assert!((estimate_gamma(0.25, 0.5).unwrap() - 0.5).abs() < 1e-15);
        // ln(0.5)/ln(0.8) evaluated independently.
        let expected = -0.693_147_180_559_945_3_f64 / -0.223_143_551_314_209_76_f64;
        let got = estimate_gamma(0.8, 0.5).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 3.1063).abs() < 1e-4);
        assert!(matches!(estimate_gamma(0.0, 0.5), Err(Error::DegenerateFrame(_))));
        assert!(matches!(estimate_gamma(1.0, 0.5), Err(Error::DegenerateFrame(_))));
    }

    #[test]
    fn gamma_application() {
        let clip = constant_clip(2, 3, 3, 0.37);
        assert_eq!(apply_gamma(&clip, GammaParams::new(1.0, 0.5).unwrap()), clip);
        let quarter = constant_clip(1, 1, 1, 0.25);
        let out = apply_gamma(&quarter, GammaParams::new(0.5, 0.5).unwrap());
        assert!((out.frame(0).get(0, 0, 0) - 0.5).abs() < 1e-15);
        let bright = constant_clip(1, 4, 4, 0.8);
        let g = estimate_gamma(bright.frame(0).mean(), 0.5).unwrap();
        let out = apply_gamma(&bright, GammaParams::new(g, 0.5).unwrap());
        assert!((out.frame(0).mean() - 0.5).abs() < 1e-9);
        assert!(GammaParams::new(0.0, 0.5).is_err());
    }

    #[test]
    fn sampling_rules() {
        let clip = indexed_clip(40);
        let spec = SampleSpec { seed: 5, ..SampleSpec::default() };
        assert_eq!(sample_indices(40, &spec).unwrap(), (0..40).collect::<Vec<_>>());
        assert_eq!(sample_frames(&clip, &spec).unwrap(), clip);

        let idx = sample_indices(100, &spec).unwrap();
        assert_eq!(idx.len(), 40);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(idx, sample_indices(100, &spec).unwrap());

        let short = sample_indices(25, &spec).unwrap();
        let mut expected: Vec<usize> = (0..25).collect();
        expected.extend(std::iter::repeat_n(24, 15));
        assert_eq!(short, expected);

        assert!(sample_indices(0, &spec).is_err());
    }

    #[test]
    fn resize_and_normalize() {
        let clip = constant_clip(2, 20, 30, 0.5);
        let out = resize_normalize(&clip, (324, 324), &Normalization::IDENTITY).unwrap();
        assert_eq!((out.len(), out.height(), out.width()), (2, 324, 324));

        let half = Normalization { mean: [0.5; 3], std: [0.5; 3] };
        let zeros = resize_normalize(&clip, (7, 9), &half).unwrap();
        assert!(zeros.frames().iter().all(|f| f.data().iter().all(|&v| v == 0.0)));

        let zero_std = Normalization { mean: [0.0; 3], std: [1.0, 0.0, 1.0] };
        assert!(resize_normalize(&clip, (7, 9), &zero_std).is_err());
    }

    #[test]
    fn hflip_extremes() {
        let frames = vec![Frame::new(1, 3, (0..9).map(|v| v as f64 / 10.0).collect()).unwrap()];
        let clip = FrameSequence::new(frames, 30.0).unwrap();
        assert_eq!(random_hflip(&clip, 0.0, 1).unwrap(), clip);
        let once = random_hflip(&clip, 1.0, 1).unwrap();
        assert_eq!(once.frame(0).get(0, 0, 0), clip.frame(0).get(0, 2, 0));
        assert_eq!(random_hflip(&once, 1.0, 2).unwrap(), clip);
    }

    #[test]
    fn hflip_fraction_monte_carlo() {
        let flips = (0..10_000u64).filter(|&s| flip_decision(0.5, s)).count();
        let frac = flips as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    proptest! {
        #[test]
        fn sample_length_is_exact(total in 1usize..300, n in 1usize..80, seed in any::<u64>()) {
            let idx = sample_indices(total, &SampleSpec { n_frames: n, seed, padding: Padding::RepeatLast }).unwrap();
            prop_assert_eq!(idx.len(), n);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(idx.iter().all(|&i| i < total));
        }

        #[test]
        fn gamma_is_monotone_and_fixes_endpoints(g in 0.05f64..8.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let clip = FrameSequence::new(vec![Frame::new(1, 2, vec![a, b, 0.0, 1.0, a, b]).unwrap()], 30.0).unwrap();
            let out = apply_gamma(&clip, GammaParams::new(g, 0.5).unwrap());
            let f = out.frame(0);
            prop_assert_eq!(f.get(0, 0, 2), 0.0);
            prop_assert_eq!(f.get(0, 1, 0), 1.0);
            prop_assert_eq!(a <= b, f.get(0, 0, 0) <= f.get(0, 0, 1));
        }

        #[test]
        fn mean_pixel_maps_to_target(m in 0.01f64..0.99, target in 0.05f64..0.95) {
            let g = estimate_gamma(m, target).unwrap();
            prop_assert!((m.powf(g) - target).abs() < 1e-12);
        }

        #[test]
        fn normalize_round_trips(v in prop::collection::vec(0.0f64..1.0, 12), mean in 0.0f64..1.0, std in 0.1f64..2.0) {
            let clip = FrameSequence::new(vec![Frame::new(2, 2, v).unwrap()], 30.0).unwrap();
            let norm = Normalization { mean: [mean; 3], std: [std, std * 0.5, std * 2.0] };
            let resized = resize_normalize(&clip, (3, 5), &Normalization::IDENTITY).unwrap();
            let back = denormalize(&resize_normalize(&clip, (3, 5), &norm).unwrap(), &norm);
            for (a, b) in back.frame(0).data().iter().zip(resized.frame(0).data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
