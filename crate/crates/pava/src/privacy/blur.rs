//! Separable Gaussian blur composited through a mask.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::video::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlurParams {
    /// Standard deviation in pixels at the frame's native resolution.
    pub sigma: f64,
    /// Half-width of the kernel; `None` means `ceil(3σ)`.
    pub kernel_radius: Option<usize>,
    pub mask_dilation: usize,
}

impl Default for BlurParams {
    fn default() -> Self {
        Self {
            sigma: 12.0,
            kernel_radius: None,
            mask_dilation: 2,
        }
    }
}

impl BlurParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("blur sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.kernel_radius
            .unwrap_or_else(|| (3.0 * self.sigma).ceil() as usize)
    }
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mirror index `i` into `0..n` with edge-repeating reflection
/// (`... c b a | a b c ... x y z | z y x ...`), valid for any offset.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Full-frame separable Gaussian blur with reflective borders.
pub fn gaussian_blur(frame: &Frame, params: &BlurParams) -> Frame {
    let (h, w) = (frame.height(), frame.width());
    let radius = params.radius();
    let kernel = gaussian_kernel(params.sigma, radius);
    let r = radius as isize;
    let src = frame.data();

    let mut horiz = vec![0.0; h * w * 3];
    horiz.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, &wt) in kernel.iter().enumerate() {
                let xx = reflect_index(x as isize + k as isize - r, w);
                let base = (y * w + xx) * 3;
                for c in 0..3 {
                    acc[c] += wt * src[base + c];
                }
            }
            row[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    });

    let mut out = vec![0.0; h * w * 3];
    out.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, &wt) in kernel.iter().enumerate() {
                let yy = reflect_index(y as isize + k as isize - r, h);
                let base = (yy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += wt * horiz[base + c];
                }
            }
            row[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    });
    Frame::new(h, w, out).expect("blur output shape")
}

/// Blurred pixels where `mask` is set, the original pixels elsewhere.
pub fn blur_masked(frame: &Frame, mask: &Mask, params: &BlurParams) -> Result<Frame> {
    if mask.height() != frame.height() || mask.width() != frame.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match frame {}x{}",
            mask.height(),
            mask.width(),
            frame.height(),
            frame.width()
        )));
    }
    params.validate()?;
    if mask.is_empty() {
        return Ok(frame.clone());
    }
    let blurred = gaussian_blur(frame, params);
    let mut out = frame.clone();
    let data = out.data_mut();
    for (p, &on) in mask.bits().iter().enumerate() {
        if on {
            data[p * 3..p * 3 + 3].copy_from_slice(&blurred.data()[p * 3..p * 3 + 3]);
        }
    }
    Ok(out)
}
