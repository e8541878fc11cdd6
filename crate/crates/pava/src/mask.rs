//! Binary masks and the `PAVA-MASK v1` run-length text format.
//!
//! A mask is encoded as alternating run lengths over the row-major pixel
//! order, starting with a run of `false` (which may be 0). The run lengths
//! sum to `width * height`.
//!
//! Ground-truth track files hold one mask per frame:
//!
//! ```text
//! PAVA-MASK v1
//! size <width> <height>
//! frames <T>
//! <frame_index>\t<run> <run> ...
//! ```
//!
//! Lines starting with `#` are comments. Detection interchange files share
//! the header and codec; see [`crate::privacy::detect`].

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const MASK_HEADER: &str = "PAVA-MASK v1";
pub const MASK_EXTENSION: &str = "mask";

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Inclusive-exclusive pixel box `(x0, y0, x1, y1)`.
pub type BBox = (u32, u32, u32, u32);

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    /// Axis-aligned rectangle `[x0, x1) × [y0, y1)`, clipped to the mask.
    pub fn rect(height: usize, width: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self::from_fn(height, width, |y, x| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Morphological dilation with a `(2r+1) × (2r+1)` square structuring element.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 || self.is_empty() {
            return self.clone();
        }
        // Separable: a square element is a horizontal pass then a vertical pass.
        let mut horiz = Mask::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let lo = x.saturating_sub(radius);
                    let hi = (x + radius).min(self.width - 1);
                    for xx in lo..=hi {
                        horiz.set(y, xx, true);
                    }
                }
            }
        }
        let mut out = Mask::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if horiz.get(y, x) {
                    let lo = y.saturating_sub(radius);
                    let hi = (y + radius).min(self.height - 1);
                    for yy in lo..=hi {
                        out.set(yy, x, true);
                    }
                }
            }
        }
        out
    }

    /// Tight bounding box, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bounds = Some(match bounds {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bounds.map(|(x0, y0, x1, y1)| (x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1))
    }

    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(height: usize, width: usize, runs: &[u32]) -> Result<Mask> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (height * width) as u64 {
            return Err(Error::Shape(format!(
                "runs cover {total} pixels, mask has {}",
                height * width
            )));
        }
        let mut bits = Vec::with_capacity(height * width);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        Ok(Mask { height, width, bits })
    }

    pub fn encode_runs(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.to_runs().iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{r}").unwrap();
        }
        s
    }

    pub fn decode_runs(height: usize, width: usize, text: &str) -> Result<Mask> {
        let runs = text
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::InvalidArgument(format!("bad run length `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Mask::from_runs(height, width, &runs)
    }
}

/// Parsed `size`/`frames` header of a mask-format file; returns the body lines.
pub(crate) fn parse_header<'a>(
    text: &'a str,
    path: &Path,
) -> Result<(usize, usize, Option<usize>, Vec<(usize, &'a str)>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, l)) if l.trim() == MASK_HEADER => {}
        _ => return Err(Error::corrupt("mask", path, format!("missing `{MASK_HEADER}` header"))),
    }
    let (width, height) = match lines.next() {
        Some((_, l)) => {
            let parts: Vec<&str> = l.split_whitespace().collect();
            match parts.as_slice() {
                ["size", w, h] => (
                    w.parse().map_err(|_| Error::corrupt("mask", path, "bad width"))?,
                    h.parse().map_err(|_| Error::corrupt("mask", path, "bad height"))?,
                ),
                _ => return Err(Error::corrupt("mask", path, "expected `size <width> <height>`")),
            }
        }
        None => return Err(Error::corrupt("mask", path, "missing size line")),
    };
    let mut rest: Vec<(usize, &str)> = lines.collect();
    let mut frames = None;
    if let Some((_, l)) = rest.first() {
        if let Some(n) = l.strip_prefix("frames ") {
            frames = Some(
                n.trim()
                    .parse()
                    .map_err(|_| Error::corrupt("mask", path, "bad frame count"))?,
            );
            rest.remove(0);
        }
    }
    Ok((width, height, frames, rest))
}

/// Per-frame ground-truth masks for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTrack {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Mask>,
}

impl MaskTrack {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MASK_HEADER}\nsize {} {}\nframes {}\n",
            self.width,
            self.height,
            self.masks.len()
        );
        for (t, m) in self.masks.iter().enumerate() {
            writeln!(s, "{t}\t{}", m.encode_runs()).unwrap();
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(Error::io(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<MaskTrack> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let (width, height, frames, body) = parse_header(&text, path)?;
        let frames = frames.ok_or_else(|| Error::corrupt("mask", path, "missing frames line"))?;
        let mut masks = vec![None; frames];
        for (lineno, line) in body {
            let (idx, runs) = line
                .split_once('\t')
                .ok_or_else(|| Error::corrupt("mask", path, format!("line {}: no tab", lineno + 1)))?;
            let t: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::corrupt("mask", path, format!("line {}: bad frame index", lineno + 1)))?;
            if t >= frames {
                return Err(Error::corrupt("mask", path, format!("frame {t} out of range")));
            }
            masks[t] = Some(
                Mask::decode_runs(height, width, runs)
                    .map_err(|e| Error::corrupt("mask", path, e.to_string()))?,
            );
        }
        let masks = masks
            .into_iter()
            .enumerate()
            .map(|(t, m)| m.ok_or_else(|| Error::corrupt("mask", path, format!("frame {t} missing"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskTrack { height, width, masks })
    }
}
