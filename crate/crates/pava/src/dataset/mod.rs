//! Clip catalogues: manifests, ingest, splitting, mixed sub-datasets and the
//! synthetic desk-scale generator.
//!
//! A manifest file (`manifest.jsonl`) holds one JSON object per line with
//! exactly the fields `clip_id, path, label, subject_id, split, variant`.
//! Relative paths are resolved against the manifest's directory.

mod ingest;
mod split;
mod synth;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ActivityLabel;

pub use ingest::{ingest, IngestOptions, IngestOutcome, RecordError};
pub use split::{calibration_split, split};
pub use synth::{clip_id, mask_path_for, motion_direction, synth_dataset, SensitiveRegionSpec, SynthConfig};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    Blurred,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubDataset {
    Original,
    Blurred,
    Mixed,
}

impl std::fmt::Display for SubDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SubDataset::Original => "original",
            SubDataset::Blurred => "blurred",
            SubDataset::Mixed => "mixed",
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub path: PathBuf,
    pub label: ActivityLabel,
    pub subject_id: String,
    pub split: Split,
    pub variant: Variant,
}

#[derive(Clone, PartialEq, Debug)]
pub struct DatasetManifest {
    pub records: Vec<ClipRecord>,
    pub sub_dataset: SubDataset,
}

impl DatasetManifest {
    /// Wraps records, inferring the sub-dataset from the variants present.
    pub fn new(records: Vec<ClipRecord>) -> Self {
        let sub_dataset = infer_sub_dataset(&records);
        Self { records, sub_dataset }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Clip counts per label index (length 18).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; ActivityLabel::COUNT];
        for r in &self.records {
            hist[r.label.index()] += 1;
        }
        hist
    }

    pub fn clip_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.clip_id.as_str()).collect()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        for r in &mut self.records {
            r.split = split;
        }
        self
    }

    pub fn filter(&self, keep: impl Fn(&ClipRecord) -> bool) -> DatasetManifest {
        DatasetManifest::new(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let reader = BufReader::new(File::open(path).map_err(Error::io(path))?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(Error::io(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: ClipRecord = serde_json::from_str(&line)
                .map_err(|e| Error::corrupt("manifest", path, format!("line {}: {e}", i + 1)))?;
            if rec.path.is_relative() {
                rec.path = base.join(&rec.path);
            }
            records.push(rec);
        }
        Ok(Self::new(records))
    }

    /// Writes one record per line; paths under the manifest's directory are
    /// stored relative to it.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
        for rec in &self.records {
            let mut rec = rec.clone();
            if let Ok(rel) = rec.path.strip_prefix(base) {
                rec.path = rel.to_path_buf();
            }
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(Error::io(path))?;
        }
        w.flush().map_err(Error::io(path))
    }
}

fn infer_sub_dataset(records: &[ClipRecord]) -> SubDataset {
    let has = |v| records.iter().any(|r| r.variant == v);
    match (has(Variant::Original), has(Variant::Blurred)) {
        (true, true) => SubDataset::Mixed,
        (false, true) => SubDataset::Blurred,
        _ => SubDataset::Original,
    }
}

/// Concatenates matching original and blurred manifests into a mixed one.
pub fn build_mixed(original: &DatasetManifest, blurred: &DatasetManifest) -> Result<DatasetManifest> {
    let a = original.clip_ids();
    let b = blurred.clip_ids();
    let diff: Vec<String> = a.symmetric_difference(&b).map(|s| s.to_string()).collect();
    if !diff.is_empty() {
        return Err(Error::ClipIdMismatch(diff));
    }
    fn tag(m: &DatasetManifest, v: Variant) -> impl Iterator<Item = ClipRecord> + '_ {
        m.records.iter().cloned().map(move |mut r| {
            r.variant = v;
            r
        })
    }
    let records: Vec<ClipRecord> = tag(original, Variant::Original)
        .chain(tag(blurred, Variant::Blurred))
        .collect();
    Ok(DatasetManifest {
        sub_dataset: if records.is_empty() {
            SubDataset::Mixed
        } else {
            infer_sub_dataset(&records)
        },
        records,
    })
}

#[cfg(test)]
pub(crate) fn fake_records(n: usize, classes: usize) -> Vec<ClipRecord> {
    (0..n)
        .map(|i| ClipRecord {
            clip_id: format!("clip{i:05}"),
            path: PathBuf::from(format!("clips/clip{i:05}.pclip")),
            label: ActivityLabel::from_index(i % classes).unwrap(),
            subject_id: format!("s{}", i % 7),
            split: Split::Train,
            variant: Variant::Original,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn mixed_doubles_the_paper_sizes() {
        for n in [873, 364] {
            let orig = DatasetManifest::new(fake_records(n, 18));
            let blur = DatasetManifest::new(
                fake_records(n, 18)
                    .into_iter()
                    .map(|mut r| {
                        r.variant = Variant::Blurred;
                        r
                    })
                    .collect(),
            );
            let mixed = build_mixed(&orig, &blur).unwrap();
            assert_eq!(mixed.len(), 2 * n);
            assert_eq!(mixed.sub_dataset, SubDataset::Mixed);
            let mut seen: HashMap<&str, Vec<Variant>> = HashMap::new();
            for r in &mixed.records {
                seen.entry(&r.clip_id).or_default().push(r.variant);
            }
            assert!(seen.values().all(|v| v.len() == 2 && v[0] != v[1]));
        }
    }

    #[test]
    fn mixed_of_empties_is_empty() {
        let m = build_mixed(&DatasetManifest::empty(), &DatasetManifest::empty()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn mixed_reports_symmetric_difference() {
        let a = DatasetManifest::new(fake_records(3, 2));
        let mut recs = fake_records(3, 2);
        recs[2].clip_id = "other".into();
        let b = DatasetManifest::new(recs);
        match build_mixed(&a, &b) {
            Err(Error::ClipIdMismatch(d)) => assert_eq!(d, vec!["clip00002".to_string(), "other".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_has_exact_fields_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let mut recs = fake_records(4, 3);
        for r in &mut recs {
            r.path = dir.path().join(&r.path);
        }
        let m = DatasetManifest::new(recs);
        m.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: BTreeSet<&str> = first.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        assert_eq!(
            keys,
            ["clip_id", "path", "label", "subject_id", "split", "variant"].into_iter().collect()
        );
        assert_eq!(first["path"], "clips/clip00000.pclip");
        assert_eq!(DatasetManifest::read_jsonl(&path).unwrap(), m);
    }
}
