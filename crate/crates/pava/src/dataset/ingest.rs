use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use super::{ClipRecord, DatasetManifest, Split, Variant};
use crate::error::{Error, Result};
use crate::labels::ActivityLabel;
use crate::video::{ClipReader, CLIP_EXTENSION};

/// Where labels come from. Without a label file, `root/<label>/...` directory
/// names are the labels and an optional intermediate directory
/// (`root/<label>/<subject>/clip.pclip`) names the subject.
#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    /// CSV with header `path,label[,subject_id]`; paths relative to the root.
    pub label_file: Option<PathBuf>,
    /// One clip id per line; matching clips are skipped (label-noise exclusions).
    pub exclude_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordError {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub manifest: DatasetManifest,
    pub errors: Vec<RecordError>,
}

#[derive(Deserialize)]
struct LabelRow {
    path: PathBuf,
    label: String,
    #[serde(default)]
    subject_id: Option<String>,
}

struct Candidate {
    clip_id: String,
    path: PathBuf,
    label: ActivityLabel,
    subject_id: String,
}

pub fn ingest(root: impl AsRef<Path>, options: &IngestOptions) -> Result<IngestOutcome> {
    let root = root.as_ref();
    let excluded = match &options.exclude_file {
        Some(p) => std::fs::read_to_string(p)
            .map_err(Error::io(p))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        None => HashSet::new(),
    };

    let candidates = match &options.label_file {
        Some(file) => from_label_file(root, file)?,
        None => from_directories(root)?,
    };

    let checked: Vec<std::result::Result<ClipRecord, RecordError>> = candidates
        .into_par_iter()
        .filter(|c| !excluded.contains(&c.clip_id))
        .map(|c| match ClipReader::open(&c.path) {
            Ok(_) => Ok(ClipRecord {
                clip_id: c.clip_id,
                path: c.path,
                label: c.label,
                subject_id: c.subject_id,
                split: Split::Train,
                variant: Variant::Original,
            }),
            Err(e) => Err(RecordError {
                path: c.path,
                reason: e.to_string(),
            }),
        })
        .collect();

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for item in checked {
        match item {
            Ok(r) => records.push(r),
            Err(e) => errors.push(e),
        }
    }
    records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    errors.sort_by(|a, b| a.path.cmp(&b.path));
    let mut seen = HashSet::new();
    if let Some(dup) = records.iter().find(|r| !seen.insert(r.clip_id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate clip id `{}`", dup.clip_id)));
    }
    Ok(IngestOutcome {
        manifest: DatasetManifest::new(records),
        errors,
    })
}

fn clip_id_for(rel: &Path) -> String {
    rel.with_extension("")
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn from_label_file(root: &Path, file: &Path) -> Result<Vec<Candidate>> {
    let mut reader = csv::Reader::from_path(file)?;
    let mut out = Vec::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row?;
        let label: ActivityLabel = row.label.trim().parse()?;
        out.push(Candidate {
            clip_id: clip_id_for(&row.path),
            path: root.join(&row.path),
            label,
            subject_id: row.subject_id.unwrap_or_else(|| "unknown".into()),
        });
    }
    Ok(out)
}

fn from_directories(root: &Path) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Err(Error::InvalidArgument(format!("{} does not exist", root.display())));
    }
    for entry in sorted_entries(root)? {
        if !entry.is_dir() {
            continue;
        }
        let name = entry.file_name().unwrap().to_string_lossy().into_owned();
        let label: ActivityLabel = name.parse()?;
        let mut files = Vec::new();
        collect_clips(&entry, &mut files)?;
        for path in files {
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            let within = path.strip_prefix(&entry).unwrap();
            let subject_id = match within.components().count() {
                1 => "unknown".to_string(),
                _ => within
                    .components()
                    .next()
                    .unwrap()
                    .as_os_str()
                    .to_string_lossy()
                    .into_owned(),
            };
            out.push(Candidate {
                clip_id: clip_id_for(&rel),
                path,
                label,
                subject_id,
            });
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(dir)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn collect_clips(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for path in sorted_entries(dir)? {
        if path.is_dir() {
            collect_clips(&path, out)?;
        } else if path.extension().is_some_and(|e| e == CLIP_EXTENSION) {
            out.push(path);
        }
    }
    Ok(())
}
