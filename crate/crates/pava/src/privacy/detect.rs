//! Detector backends.
//!
//! * `fake` echoes the ground-truth mask track written by the synthetic
//!   generator; it is deterministic and fully shareable across threads.
//! * `file` reads a detection interchange file produced elsewhere.
//! * `ref` runs an external instance-segmentation program (for example a
//!   Mask R-CNN with an Inception-ResNet-v2 atrous backbone) once per clip
//!   and reads back the interchange file it writes.
//!
//! Detection interchange file (`.det`), one record per frame per instance:
//!
//! ```text
//! PAVA-MASK v1
//! size <width> <height>
//! # frame_index  class_name  confidence  rle_mask
//! 0  tv  0.97  120 40 16 40 ...
//! ```
//!
//! Fields are tab-separated; the mask uses the same run-length codec as
//! ground-truth tracks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::InstanceDetection;
use crate::dataset::mask_path_for;
use crate::error::{Error, Result};
use crate::mask::{parse_header, Mask, MaskTrack, MASK_HEADER};
use crate::video::{read_clip, write_clip, Frame};

pub const DETECTION_EXTENSION: &str = "det";

pub trait Detector: Send + Sync {
    fn detect(&self, frame: &Frame, frame_index: usize) -> Result<Vec<InstanceDetection>>;

    /// Whether one handle may be used from several worker threads at once.
    fn shareable(&self) -> bool {
        true
    }
}

fn check_dims(frame: &Frame, frame_index: usize, height: usize, width: usize) -> Result<()> {
    if frame.height() != height || frame.width() != width {
        return Err(Error::Detector {
            frame: frame_index,
            reason: format!(
                "detections are {}x{} but frame is {}x{}",
                height,
                width,
                frame.height(),
                frame.width()
            ),
        });
    }
    Ok(())
}

/// Reports the ground-truth region of each frame as one instance of `label`.
pub struct FakeDetector {
    track: MaskTrack,
    label: String,
}

impl FakeDetector {
    pub fn new(track: MaskTrack, label: impl Into<String>) -> Self {
        Self {
            track,
            label: label.into(),
        }
    }

    pub fn for_clip(clip_path: &Path, label: impl Into<String>) -> Result<Self> {
        Ok(Self::new(MaskTrack::read(mask_path_for(clip_path))?, label))
    }
}

impl Detector for FakeDetector {
    fn detect(&self, frame: &Frame, frame_index: usize) -> Result<Vec<InstanceDetection>> {
        check_dims(frame, frame_index, self.track.height, self.track.width)?;
        let mask = self.track.masks.get(frame_index).ok_or_else(|| Error::Detector {
            frame: frame_index,
            reason: format!("ground truth has only {} frames", self.track.masks.len()),
        })?;
        if mask.is_empty() {
            return Ok(Vec::new());
        }
        Ok(vec![InstanceDetection::new(self.label.clone(), 1.0, mask.clone())])
    }
}

/// Parsed detection interchange file.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionFile {
    pub height: usize,
    pub width: usize,
    pub by_frame: BTreeMap<usize, Vec<InstanceDetection>>,
}

impl DetectionFile {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MASK_HEADER}\nsize {} {}\n# frame_index\tclass_name\tconfidence\trle_mask\n",
            self.width, self.height
        );
        for (t, dets) in &self.by_frame {
            for d in dets {
                writeln!(s, "{t}\t{}\t{}\t{}", d.class_name, d.confidence, d.mask.encode_runs()).unwrap();
            }
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(Error::io(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<DetectionFile> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let (width, height, _, body) = parse_header(&text, path)?;
        let mut by_frame: BTreeMap<usize, Vec<InstanceDetection>> = BTreeMap::new();
        for (lineno, line) in body {
            let bad = |what: &str| Error::corrupt("detection", path, format!("line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [idx, class, conf, runs] = fields.as_slice() else {
                return Err(bad("expected 4 tab-separated fields"));
            };
            let t: usize = idx.trim().parse().map_err(|_| bad("bad frame index"))?;
            let confidence: f64 = conf.trim().parse().map_err(|_| bad("bad confidence"))?;
            let mask = Mask::decode_runs(height, width, runs).map_err(|e| bad(&e.to_string()))?;
            by_frame
                .entry(t)
                .or_default()
                .push(InstanceDetection::new(class.to_string(), confidence, mask));
        }
        Ok(DetectionFile {
            height,
            width,
            by_frame,
        })
    }
}

pub struct FileDetector {
    file: DetectionFile,
}

impl FileDetector {
    pub fn new(file: DetectionFile) -> Self {
        Self { file }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(DetectionFile::read(path)?))
    }
}

impl Detector for FileDetector {
    fn detect(&self, frame: &Frame, frame_index: usize) -> Result<Vec<InstanceDetection>> {
        check_dims(frame, frame_index, self.file.height, self.file.width)?;
        Ok(self.file.by_frame.get(&frame_index).cloned().unwrap_or_default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

/// External segmentation program. It is invoked as
/// `program [args...] --model <model_path> --clip <clip> --out <det file>`
/// and must write a detection interchange file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCommandConfig {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    pub model_path: PathBuf,
    /// Channel order the program's runtime expects; clips are stored as RGB
    /// and converted on the way out when this is `bgr`.
    #[serde(default = "default_channel_order")]
    pub channel_order: ChannelOrder,
}

fn default_channel_order() -> ChannelOrder {
    ChannelOrder::Rgb
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_path(stem: &str, ext: &str) -> PathBuf {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("pava-{}-{n}-{stem}.{ext}", std::process::id()))
}

fn run_external(cfg: &ExternalCommandConfig, clip_path: &Path) -> Result<DetectionFile> {
    if !cfg.model_path.exists() {
        return Err(Error::BackendLoad(format!(
            "model file {} not found",
            cfg.model_path.display()
        )));
    }
    let stem = clip_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let converted = match cfg.channel_order {
        ChannelOrder::Rgb => None,
        ChannelOrder::Bgr => {
            let clip = read_clip(clip_path)?;
            let swapped = clip.map_frames(|f| {
                let mut out = f.clone();
                for px in out.data_mut().chunks_mut(3) {
                    px.swap(0, 2);
                }
                out
            });
            let p = temp_path(&stem, "pclip");
            write_clip(&p, &swapped)?;
            Some(p)
        }
    };
    let input = converted.as_deref().unwrap_or(clip_path);
    let out = temp_path(&stem, DETECTION_EXTENSION);
    let status = Command::new(&cfg.program)
        .args(&cfg.args)
        .arg("--model")
        .arg(&cfg.model_path)
        .arg("--clip")
        .arg(input)
        .arg("--out")
        .arg(&out)
        .status()
        .map_err(|e| Error::BackendLoad(format!("cannot run {}: {e}", cfg.program.display())));
    if let Some(p) = &converted {
        let _ = std::fs::remove_file(p);
    }
    let status = status?;
    if !status.success() {
        let _ = std::fs::remove_file(&out);
        return Err(Error::Detector {
            frame: 0,
            reason: format!("{} exited with {status}", cfg.program.display()),
        });
    }
    let file = DetectionFile::read(&out);
    let _ = std::fs::remove_file(&out);
    file
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Ref,
    Fake,
    File,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ref" => Ok(BackendKind::Ref),
            "fake" => Ok(BackendKind::Fake),
            "file" => Ok(BackendKind::File),
            other => Err(Error::InvalidArgument(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Label the fake backend reports for ground-truth regions.
    pub fake_label: String,
    /// Directory holding `<clip stem>.det` files; defaults to next to the clip.
    pub detections_dir: Option<PathBuf>,
    pub external: Option<ExternalCommandConfig>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Fake,
            fake_label: "tv".into(),
            detections_dir: None,
            external: None,
        }
    }
}

/// Opens the configured backend for one clip.
pub fn open_detector(cfg: &BackendConfig, clip_path: &Path) -> Result<Box<dyn Detector>> {
    match cfg.kind {
        BackendKind::Fake => Ok(Box::new(FakeDetector::for_clip(clip_path, cfg.fake_label.clone())?)),
        BackendKind::File => {
            let path = match &cfg.detections_dir {
                Some(dir) => dir.join(
                    Path::new(clip_path.file_name().unwrap_or_default()).with_extension(DETECTION_EXTENSION),
                ),
                None => clip_path.with_extension(DETECTION_EXTENSION),
            };
            Ok(Box::new(FileDetector::open(path)?))
        }
        BackendKind::Ref => {
            let ext = cfg
                .external
                .as_ref()
                .ok_or_else(|| Error::BackendLoad("the ref backend needs an [backend.external] section".into()))?;
            Ok(Box::new(FileDetector::new(run_external(ext, clip_path)?)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fake_detector_echoes_ground_truth() {
        let region = Mask::rect(6, 8, 2, 1, 5, 4);
        let track = MaskTrack {
            height: 6,
            width: 8,
            masks: vec![region.clone(), Mask::empty(6, 8)],
        };
        let det = FakeDetector::new(track, "tv");
        let frame = Frame::filled(6, 8, 0.3);
        let found = det.detect(&frame, 0).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].mask, region);
        assert_eq!(found[0].bbox, (2, 1, 5, 4));
        assert!(det.detect(&frame, 1).unwrap().is_empty());
        assert!(matches!(det.detect(&frame, 2), Err(Error::Detector { frame: 2, .. })));
        assert!(det.detect(&Frame::filled(5, 8, 0.0), 0).is_err());
    }

    #[test]
    fn detection_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.det");
        let mut by_frame = BTreeMap::new();
        by_frame.insert(
            0,
            vec![
                InstanceDetection::new("cell phone", 0.75, Mask::rect(4, 5, 1, 1, 3, 2)),
                InstanceDetection::new("person", 0.5, Mask::rect(4, 5, 0, 0, 5, 4)),
            ],
        );
        by_frame.insert(3, vec![InstanceDetection::new("tv", 0.25, Mask::empty(4, 5))]);
        let file = DetectionFile {
            height: 4,
            width: 5,
            by_frame,
        };
        file.write(&p).unwrap();
        assert_eq!(DetectionFile::read(&p).unwrap(), file);
        let det = FileDetector::open(&p).unwrap();
        assert_eq!(det.detect(&Frame::filled(4, 5, 0.0), 0).unwrap().len(), 2);
        assert!(det.detect(&Frame::filled(4, 5, 0.0), 1).unwrap().is_empty());
    }

    #[test]
    fn ref_backend_without_model_fails_to_load() {
        let cfg = BackendConfig {
            kind: BackendKind::Ref,
            external: Some(ExternalCommandConfig {
                program: "true".into(),
                args: vec![],
                model_path: "/nonexistent/model.pb".into(),
                channel_order: ChannelOrder::Bgr,
            }),
            ..BackendConfig::default()
        };
        assert!(matches!(
            open_detector(&cfg, Path::new("x.pclip")),
            Err(Error::BackendLoad(_))
        ));
    }
}
