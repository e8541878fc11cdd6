//! In-memory frames and the `PAVA-CLIP v1` container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"PAVACLIP"
//! 8       4     version (u32, = 1)
//! 12      4     frame count T (u32)
//! 16      4     height H (u32)
//! 20      4     width W (u32)
//! 24      4     frames per second (f32)
//! 28      T*H*W*3  RGB bytes, frame-major, row-major, channel-interleaved
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 8] = b"PAVACLIP";
pub const CLIP_VERSION: u32 = 1;
pub const CLIP_HEADER_LEN: u64 = 28;
pub const CLIP_EXTENSION: &str = "pclip";

/// One RGB frame, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "frame {}x{}x3 needs {} values, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn flipped_horizontally(&self) -> Frame {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }
}

/// A decoded clip: `T` frames sharing one spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    source_fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, source_fps: f64) -> Result<Self> {
        if let Some(first) = frames.first() {
            let (h, w) = (first.height, first.width);
            if let Some((i, f)) = frames
                .iter()
                .enumerate()
                .find(|(_, f)| f.height != h || f.width != w)
            {
                return Err(Error::Shape(format!(
                    "frame {i} is {}x{}, expected {h}x{w}",
                    f.height, f.width
                )));
            }
        }
        Ok(Self { frames, source_fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    pub fn source_fps(&self) -> f64 {
        self.source_fps
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    /// Frames at `indices`, in the given order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> FrameSequence {
        FrameSequence {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            source_fps: self.source_fps,
        }
    }

    pub fn map_frames(&self, f: impl Fn(&Frame) -> Frame) -> FrameSequence {
        FrameSequence {
            frames: self.frames.iter().map(f).collect(),
            source_fps: self.source_fps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipHeader {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

impl ClipHeader {
    fn frame_bytes(&self) -> usize {
        self.height * self.width * 3
    }

    fn payload_bytes(&self) -> u64 {
        (self.frames * self.frame_bytes()) as u64
    }
}

/// Random access to the frames of a clip file without decoding all of it.
pub struct ClipReader {
    header: ClipHeader,
    reader: BufReader<File>,
    path: std::path::PathBuf,
}

impl ClipReader {
    /// Opens a clip and validates its header and total length.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(Error::io(path))?;
        let file_len = file.metadata().map_err(Error::io(path))?.len();
        let mut reader = BufReader::new(file);
        let mut head = [0u8; CLIP_HEADER_LEN as usize];
        reader
            .read_exact(&mut head)
            .map_err(|_| Error::corrupt("clip", path, "truncated header"))?;
        if &head[0..8] != CLIP_MAGIC {
            return Err(Error::corrupt("clip", path, "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != CLIP_VERSION {
            return Err(Error::corrupt("clip", path, format!("unsupported version {version}")));
        }
        let header = ClipHeader {
            frames: u32_at(12) as usize,
            height: u32_at(16) as usize,
            width: u32_at(20) as usize,
            fps: f32::from_le_bytes(head[24..28].try_into().unwrap()) as f64,
        };
        let expected = CLIP_HEADER_LEN + header.payload_bytes();
        if file_len != expected {
            return Err(Error::corrupt(
                "clip",
                path,
                format!("expected {expected} bytes, found {file_len}"),
            ));
        }
        Ok(Self {
            header,
            reader,
            path: path.to_path_buf(),
        })
    }

    pub fn header(&self) -> ClipHeader {
        self.header
    }

    pub fn read_frame(&mut self, t: usize) -> Result<Frame> {
        if t >= self.header.frames {
            return Err(Error::InvalidArgument(format!(
                "frame {t} out of range for clip with {} frames",
                self.header.frames
            )));
        }
        let n = self.header.frame_bytes();
        let offset = CLIP_HEADER_LEN + (t * n) as u64;
        self.reader
            .seek(SeekFrom::Start(offset))
            .map_err(Error::io(&self.path))?;
        let mut bytes = vec![0u8; n];
        self.reader
            .read_exact(&mut bytes)
            .map_err(Error::io(&self.path))?;
        Frame::new(
            self.header.height,
            self.header.width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    pub fn read_frames(&mut self, indices: &[usize]) -> Result<FrameSequence> {
        let frames = indices
            .iter()
            .map(|&t| self.read_frame(t))
            .collect::<Result<Vec<_>>>()?;
        FrameSequence::new(frames, self.header.fps)
    }

    pub fn read_all(&mut self) -> Result<FrameSequence> {
        let all: Vec<usize> = (0..self.header.frames).collect();
        self.read_frames(&all)
    }
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<FrameSequence> {
    ClipReader::open(path)?.read_all()
}

/// Quantizes to 8 bits (round to nearest, clamped to [0, 1]) and writes the clip.
pub fn write_clip(path: impl AsRef<Path>, seq: &FrameSequence) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let mut head = Vec::with_capacity(CLIP_HEADER_LEN as usize);
    head.extend_from_slice(CLIP_MAGIC);
    head.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    head.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    head.extend_from_slice(&(seq.height() as u32).to_le_bytes());
    head.extend_from_slice(&(seq.width() as u32).to_le_bytes());
    head.extend_from_slice(&(seq.source_fps() as f32).to_le_bytes());
    w.write_all(&head).map_err(Error::io(path))?;
    for frame in seq.frames() {
        let bytes: Vec<u8> = frame.data().iter().map(|&v| quantize(v)).collect();
        w.write_all(&bytes).map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
