//! The in-repo convolutional backbone and the precomputed-feature sidecar
//! format used in place of large pretrained networks.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};

use super::layers::{Visit, VisitMut};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::video::{Frame, FrameSequence};
use rand::Rng as _;

/// 3×3 convolution, stride 2, zero padding 1, followed by ReLU.
///
/// Feature maps are stored pixel-major, `(H·W) × C`; the weight is
/// `out × (9·in)` with columns ordered `(ky, kx, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

struct ConvTrace {
    cols: Array2<f64>,
    out: Array2<f64>,
    in_h: usize,
    in_w: usize,
}

fn out_size(n: usize) -> usize {
    (n - 1) / 2 + 1
}

fn im2col(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c = x.ncols();
    let (oh, ow) = (out_size(h), out_size(w));
    let mut cols = Array2::zeros((oh * ow, 9 * c));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = cols.row_mut(oy * ow + ox);
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = x.row(iy as usize * w + ix as usize);
                    let off = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        row[off + ch] = src[ch];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let (oh, ow) = (out_size(h), out_size(w));
    let mut dx = Array2::zeros((h * w, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = dcols.row(oy * ow + ox);
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let mut dst = dx.row_mut(iy as usize * w + ix as usize);
                    let off = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        dst[ch] += row[off + ch];
                    }
                }
            }
        }
    }
    dx
}

impl Conv2d {
    fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let fan_in = 9 * input;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, fan_in), |_| rng.random_range(-bound..=bound)),
            bias: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn forward(&self, x: &Array2<f64>, h: usize, w: usize) -> ConvTrace {
        let cols = im2col(x, h, w);
        let out = (cols.dot(&self.weight.t()) + &self.bias).mapv(|v| v.max(0.0));
        ConvTrace { cols, out, in_h: h, in_w: w }
    }

    fn backward(&self, trace: &ConvTrace, d_out: &Array2<f64>, grad: &mut Conv2d) -> Array2<f64> {
        let mut d_pre = d_out.clone();
        ndarray::Zip::from(&mut d_pre)
            .and(&trace.out)
            .for_each(|d, &o| if o <= 0.0 { *d = 0.0 });
        grad.weight += &d_pre.t().dot(&trace.cols);
        grad.bias += &d_pre.sum_axis(Axis(0));
        let in_ch = self.weight.ncols() / 9;
        col2im(&d_pre.dot(&self.weight), trace.in_h, trace.in_w, in_ch)
    }
}

/// Cell boundaries of adaptive average pooling: `[⌊i·n/g⌋, ⌈(i+1)·n/g⌉)`.
fn pool_range(i: usize, n: usize, g: usize) -> (usize, usize) {
    (i * n / g, ((i + 1) * n).div_ceil(g))
}

/// Small randomly initialized convnet: three stride-2 conv layers and
/// adaptive average pooling onto a `grid × grid` cell layout, so coarse
/// spatial position survives into the feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyBackbone {
    pub convs: Vec<Conv2d>,
    pub grid: usize,
}

pub(crate) struct BackboneTrace {
    convs: Vec<ConvTrace>,
    h: usize,
    w: usize,
}

impl TinyBackbone {
    pub const CHANNELS: [usize; 3] = [32, 64, 64];
    pub const GRID: usize = 4;
    pub const FEATURE_DIM: usize = 64 * 4 * 4;

    pub fn new(rng: &mut Rng) -> Self {
        let mut input = 3;
        let convs = Self::CHANNELS
            .iter()
            .map(|&out| {
                let conv = Conv2d::new(input, out, rng);
                input = out;
                conv
            })
            .collect();
        Self { convs, grid: Self::GRID }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            grid: self.grid,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().map_or(3, |c| c.weight.nrows()) * self.grid * self.grid
    }

    pub(crate) fn forward_trace(&self, frame: &Frame) -> (Array1<f64>, BackboneTrace) {
        let (mut h, mut w) = (frame.height(), frame.width());
        let mut x = Array2::from_shape_vec((h * w, 3), frame.data().to_vec()).expect("HWC frame");
        let mut traces = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let t = conv.forward(&x, h, w);
            x = t.out.clone();
            h = out_size(h);
            w = out_size(w);
            traces.push(t);
        }
        (self.pool(&x, h, w), BackboneTrace { convs: traces, h, w })
    }

    fn pool(&self, x: &Array2<f64>, h: usize, w: usize) -> Array1<f64> {
        let (g, c) = (self.grid, x.ncols());
        let mut out = Array1::zeros(g * g * c);
        for gy in 0..g {
            let (y0, y1) = pool_range(gy, h, g);
            for gx in 0..g {
                let (x0, x1) = pool_range(gx, w, g);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                let base = (gy * g + gx) * c;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let row = x.row(y * w + xx);
                        for ch in 0..c {
                            out[base + ch] += row[ch] / n;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, frame: &Frame) -> Array1<f64> {
        self.forward_trace(frame).0
    }

    pub(crate) fn backward(&self, trace: &BackboneTrace, d_feat: &Array1<f64>, grad: &mut TinyBackbone) {
        let (g, h, w) = (self.grid, trace.h, trace.w);
        let c = self.convs.last().expect("non-empty backbone").weight.nrows();
        let mut d = Array2::zeros((h * w, c));
        for gy in 0..g {
            let (y0, y1) = pool_range(gy, h, g);
            for gx in 0..g {
                let (x0, x1) = pool_range(gx, w, g);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                let base = (gy * g + gx) * c;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let mut row = d.row_mut(y * w + xx);
                        for ch in 0..c {
                            row[ch] += d_feat[base + ch] / n;
                        }
                    }
                }
            }
        }
        for (k, conv) in self.convs.iter().enumerate().rev() {
            d = conv.backward(&trace.convs[k], &d, &mut grad.convs[k]);
        }
    }

    pub(crate) fn visit<'p>(&'p self, prefix: &str, f: Visit<'_, 'p>) {
        for (k, conv) in self.convs.iter().enumerate() {
            f(&format!("{prefix}.conv{k}.weight"), conv.weight.as_slice().unwrap());
            f(&format!("{prefix}.conv{k}.bias"), conv.bias.as_slice().unwrap());
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: VisitMut) {
        for (k, conv) in self.convs.iter_mut().enumerate() {
            f(&format!("{prefix}.conv{k}.weight"), conv.weight.as_slice_mut().unwrap());
            f(&format!("{prefix}.conv{k}.bias"), conv.bias.as_slice_mut().unwrap());
        }
    }
}

pub const FEAT_MAGIC: &[u8; 8] = b"PAVAFEAT";
pub const FEAT_VERSION: u32 = 1;
pub const FEAT_EXTENSION: &str = "feat";

/// Sidecar path holding precomputed features for a clip.
pub fn feature_path_for(clip: &Path) -> PathBuf {
    clip.with_extension(FEAT_EXTENSION)
}

/// Writes a `T × R` feature matrix: magic, version, T, R (u32 LE), then f32 LE values.
pub fn write_features(path: impl AsRef<Path>, features: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(20 + features.len() * 4);
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.ncols() as u32).to_le_bytes());
    for &v in features.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&buf).map_err(Error::io(path))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < 20 || &bytes[..8] != FEAT_MAGIC {
        return Err(Error::corrupt("features", path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(8) as u32 != FEAT_VERSION {
        return Err(Error::corrupt("features", path, format!("unsupported version {}", word(8))));
    }
    let (t, r) = (word(12), word(16));
    if bytes.len() != 20 + t * r * 4 {
        return Err(Error::corrupt("features", path, "length does not match header"));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((t, r), data).map_err(|e| Error::corrupt("features", path, e.to_string()))
}

/// Runs the backbone over every frame, returning `T × feature_dim`.
pub fn backbone_features(backbone: &TinyBackbone, seq: &FrameSequence) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = seq.frames().iter().map(|f| backbone.forward(f)).collect();
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal feature lengths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn frame(h: usize, w: usize, s: u64) -> Frame {
        let data = (0..h * w * 3)
            .map(|i| ((i as u64 * 2654435761 + s * 97) % 1000) as f64 / 1000.0 - 0.5)
            .collect();
        Frame::new(h, w, data).unwrap()
    }

    #[test]
    fn output_dimension() {
        let bb = TinyBackbone::new(&mut seed::rng(0, &[]));
        assert_eq!(bb.feature_dim(), TinyBackbone::FEATURE_DIM);
        assert_eq!(bb.forward(&frame(32, 32, 1)).len(), TinyBackbone::FEATURE_DIM);
        assert_eq!(bb.forward(&frame(9, 13, 1)).len(), TinyBackbone::FEATURE_DIM);
    }

    #[test]
    fn pool_cells_cover_the_map() {
        for n in 1..12 {
            for g in 1..6 {
                let mut covered = vec![false; n];
                for i in 0..g {
                    let (a, b) = pool_range(i, n, g);
                    assert!(a < b && b <= n);
                    covered[a..b].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let bb = TinyBackbone::new(&mut seed::rng(3, &[]));
        let f = frame(7, 6, 2);
        let probe = Array1::from_shape_fn(bb.feature_dim(), |i| ((i * 7) % 5) as f64 - 2.0);
        let loss = |b: &TinyBackbone| b.forward(&f).dot(&probe);
        let (_, trace) = bb.forward_trace(&f);
        let mut grad = bb.zeros_like();
        bb.backward(&trace, &probe, &mut grad);
        let h = 1e-6;
        for k in 0..3 {
            for idx in [0usize, 5, 17] {
                let mut plus = bb.clone();
                plus.convs[k].weight.as_slice_mut().unwrap()[idx] += h;
                let mut minus = bb.clone();
                minus.convs[k].weight.as_slice_mut().unwrap()[idx] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = grad.convs[k].weight.as_slice().unwrap()[idx];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-4, "conv{k}[{idx}]: {numeric} vs {analytic}");
            }
        }
    }

    #[test]
    fn features_round_trip_at_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.feat");
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 0.25);
        write_features(&p, &x).unwrap();
        assert_eq!(read_features(&p).unwrap(), x);
        fs::write(&p, b"PAVAFEAT").unwrap();
        assert!(matches!(read_features(&p), Err(Error::Corrupt { .. })));
    }
}
