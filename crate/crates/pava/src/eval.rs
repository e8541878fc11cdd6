//! Confusion matrices, per-class and macro precision/recall/F1, accuracy and
//! report files.
//!
//! `metrics.json` (schema version 1) holds a serialized [`MetricsReport`].
//! `confusion.csv` has a header row `true\predicted,<class>...` and one row
//! per true class. `f1_by_class.csv` has `label,f1` for a single run or
//! `label,f1_original,f1_blurred` for a paired run. CSVs are UTF-8 with LF
//! line endings.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, SubDataset};
use crate::error::{Error, Result};
use crate::labels::class_name;
use crate::loader::ClipLoader;
use crate::model::TrainedModel;
use crate::training::argmax;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const F1_FILE: &str = "f1_by_class.csv";

/// Anything that maps a clip to class probabilities.
pub trait Predictor: Sync {
    fn id(&self) -> String;
    fn num_classes(&self) -> usize;
    fn predict(&self, path: &Path, clip_id: &str) -> Result<Array1<f64>>;
}

pub struct ModelPredictor<'m> {
    model: &'m TrainedModel,
    loader: ClipLoader,
    id: String,
}

impl<'m> ModelPredictor<'m> {
    pub fn new(model: &'m TrainedModel, id: impl Into<String>) -> Self {
        Self {
            model,
            loader: ClipLoader::for_model(model, false),
            id: id.into(),
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn predict(&self, path: &Path, clip_id: &str) -> Result<Array1<f64>> {
        self.model.forward(&self.loader.load_eval(path, clip_id)?)
    }
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("confusion matrix must be square, got {n} rows of varying length")));
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Zero when nothing was evaluated.
    pub fn accuracy_percent(&self) -> f64 {
        ratio(self.trace(), self.total()) * 100.0
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], self.col_sum(c))
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], self.row_sum(c))
    }

    pub fn f1(&self, c: usize) -> f64 {
        let (p, r) = (self.precision(c), self.recall(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Relabels classes: new class `perm[c]` is old class `c`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_classes();
        let mut out = Self::new(n);
        for i in 0..n {
            for j in 0..n {
                out.counts[perm[i]][perm[j]] = self.counts[i][j];
            }
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.num_classes()).map(|c| cm.f1(c)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Unweighted mean across classes and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: Spread,
    pub recall: Spread,
    pub f1: Spread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedClip {
    pub clip_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub model_id: String,
    pub sub_dataset: SubDataset,
    pub evaluated_clips: u64,
    pub accuracy_percent: f64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub excluded: Vec<ExcludedClip>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, model_id: impl Into<String>, sub_dataset: SubDataset) -> Self {
        let per_class: Vec<ClassMetrics> = (0..cm.num_classes())
            .map(|c| ClassMetrics {
                label: class_name(c),
                precision: cm.precision(c),
                recall: cm.recall(c),
                f1: cm.f1(c),
                support: cm.row_sum(c),
            })
            .collect();
        let column = |f: fn(&ClassMetrics) -> f64| Spread::of(&per_class.iter().map(f).collect::<Vec<_>>());
        let macro_avg = MacroMetrics {
            precision: column(|m| m.precision),
            recall: column(|m| m.recall),
            f1: column(|m| m.f1),
        };
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            model_id: model_id.into(),
            sub_dataset,
            evaluated_clips: cm.total(),
            accuracy_percent: cm.accuracy_percent(),
            per_class,
            macro_avg,
            excluded: Vec::new(),
        }
    }

    pub fn f1_vector(&self) -> Vec<f64> {
        self.per_class.iter().map(|m| m.f1).collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let report: Self = serde_json::from_str(&text)?;
        if report.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::corrupt(
                "metrics",
                path,
                format!("unsupported schema version {}", report.schema_version),
            ));
        }
        Ok(report)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    /// Predicted class per evaluated clip, in manifest order.
    pub predictions: Vec<(String, usize)>,
}

/// Argmax decision per clip. Clips that fail to decode are excluded and
/// listed in the report; any other failure aborts.
pub fn evaluate(predictor: &dyn Predictor, manifest: &DatasetManifest) -> Result<Evaluation> {
    let n = predictor.num_classes();
    if let Some(r) = manifest.records.iter().find(|r| r.label.index() >= n) {
        return Err(Error::InvalidArgument(format!(
            "clip `{}` has label {} outside the predictor's {n} classes",
            r.clip_id, r.label
        )));
    }
    let outcomes: Vec<Result<usize>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let p = predictor.predict(&r.path, &r.clip_id)?;
            if p.len() != n {
                return Err(Error::Shape(format!("predictor returned {} probabilities, expected {n}", p.len())));
            }
            Ok(argmax(p.view()))
        })
        .collect();

    let mut cm = ConfusionMatrix::new(n);
    let mut excluded = Vec::new();
    let mut predictions = Vec::new();
    for (r, outcome) in manifest.records.iter().zip(outcomes) {
        match outcome {
            Ok(pred) => {
                cm.record(r.label.index(), pred);
                predictions.push((r.clip_id.clone(), pred));
            }
            Err(e @ (Error::Io { .. } | Error::Corrupt { .. })) => excluded.push(ExcludedClip {
                clip_id: r.clip_id.clone(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    let mut report = MetricsReport::from_confusion(&cm, predictor.id(), manifest.sub_dataset);
    report.excluded = excluded;
    Ok(Evaluation {
        report,
        confusion: cm,
        predictions,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

/// Writes `metrics.json`, `confusion.csv` and `f1_by_class.csv` into
/// `out_dir`, creating it if needed. Returns the written paths.
pub fn report_emit(report: &MetricsReport, cm: &ConfusionMatrix, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;

    let metrics = out_dir.join(METRICS_FILE);
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(&metrics, json).map_err(Error::io(&metrics))?;

    let confusion = out_dir.join(CONFUSION_FILE);
    let mut w = csv_writer(&confusion)?;
    let names: Vec<String> = (0..cm.num_classes()).map(class_name).collect();
    w.write_record(std::iter::once("true\\predicted".to_string()).chain(names.iter().cloned()))?;
    for (name, row) in names.iter().zip(&cm.counts) {
        w.write_record(std::iter::once(name.clone()).chain(row.iter().map(u64::to_string)))?;
    }
    w.flush().map_err(Error::io(&confusion))?;

    let f1 = out_dir.join(F1_FILE);
    let mut w = csv_writer(&f1)?;
    w.write_record(["label", "f1"])?;
    for m in &report.per_class {
        w.write_record([m.label.clone(), m.f1.to_string()])?;
    }
    w.flush().map_err(Error::io(&f1))?;
    Ok(vec![metrics, confusion, f1])
}

/// `f1_by_class.csv` comparing the same model family on original and
/// blurred test clips.
pub fn emit_paired_f1(original: &MetricsReport, blurred: &MetricsReport, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    if original.per_class.len() != blurred.per_class.len() {
        return Err(Error::Shape(format!(
            "reports cover {} and {} classes",
            original.per_class.len(),
            blurred.per_class.len()
        )));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let path = out_dir.join(F1_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["label", "f1_original", "f1_blurred"])?;
    for (o, b) in original.per_class.iter().zip(&blurred.per_class) {
        w.write_record([o.label.clone(), o.f1.to_string(), b.f1.to_string()])?;
    }
    w.flush().map_err(Error::io(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClipRecord, Split, Variant};
    use crate::labels::ActivityLabel;
    use proptest::prelude::*;

    fn fixture() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(vec![vec![2, 1, 0], vec![0, 3, 0], vec![1, 0, 3]]).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn three_class_fixture() {
        let cm = fixture();
        let p: Vec<f64> = (0..3).map(|c| cm.precision(c)).collect();
        let r: Vec<f64> = (0..3).map(|c| cm.recall(c)).collect();
        for (got, want) in p.iter().zip([2.0 / 3.0, 3.0 / 4.0, 1.0]) {
            assert!(close(*got, want), "{p:?}");
        }
        for (got, want) in r.iter().zip([2.0 / 3.0, 1.0, 3.0 / 4.0]) {
            assert!(close(*got, want), "{r:?}");
        }
        for (got, want) in per_class_f1(&cm).iter().zip([2.0 / 3.0, 6.0 / 7.0, 6.0 / 7.0]) {
            assert!(close(*got, want));
        }
        assert_eq!(cm.accuracy_percent(), 8.0 / 10.0 * 100.0);
    }

    #[test]
    fn diagonal_is_perfect() {
        let mut cm = ConfusionMatrix::new(18);
        for c in 0..18 {
            cm.counts[c][c] = c as u64 + 1;
        }
        let report = MetricsReport::from_confusion(&cm, "m", SubDataset::Original);
        assert_eq!(report.accuracy_percent, 100.0);
        assert!(report.per_class.iter().all(|m| m.f1 == 1.0));
        assert_eq!(report.macro_avg.f1.std, 0.0);
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = ConfusionMatrix::from_counts(vec![vec![2, 0], vec![0, 0]]).unwrap();
        assert_eq!(per_class_f1(&cm), vec![1.0, 0.0]);
        assert_eq!(ConfusionMatrix::new(3).accuracy_percent(), 0.0);
    }

    #[test]
    fn macro_is_unweighted_mean_with_population_std() {
        let report = MetricsReport::from_confusion(&fixture(), "m", SubDataset::Original);
        let f1 = [2.0 / 3.0, 6.0 / 7.0, 6.0 / 7.0];
        let mean = f1.iter().sum::<f64>() / 3.0;
        let std = (f1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(close(report.macro_avg.f1.mean, mean));
        assert!(close(report.macro_avg.f1.std, std));
    }

    #[test]
    fn non_square_rejected() {
        assert!(ConfusionMatrix::from_counts(vec![vec![1, 2], vec![3]]).is_err());
    }

    proptest! {
        #[test]
        fn relabeling_permutes_metrics(
            counts in prop::collection::vec(prop::collection::vec(0u64..20, 4), 4),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let cm = ConfusionMatrix::from_counts(counts).unwrap();
            let pm = cm.permuted(&perm);
            for c in 0..4 {
                prop_assert_eq!(cm.precision(c), pm.precision(perm[c]));
                prop_assert_eq!(cm.recall(c), pm.recall(perm[c]));
                prop_assert_eq!(cm.f1(c), pm.f1(perm[c]));
            }
            prop_assert_eq!(cm.accuracy_percent(), pm.accuracy_percent());
            let a = MetricsReport::from_confusion(&cm, "m", SubDataset::Original).macro_avg;
            let b = MetricsReport::from_confusion(&pm, "m", SubDataset::Original).macro_avg;
            prop_assert!((a.f1.mean - b.f1.mean).abs() < 1e-12);
            prop_assert!((a.f1.std - b.f1.std).abs() < 1e-12);
        }

        #[test]
        fn accuracy_is_trace_over_total(counts in prop::collection::vec(prop::collection::vec(0u64..50, 5), 5)) {
            let cm = ConfusionMatrix::from_counts(counts).unwrap();
            let total = cm.total();
            prop_assume!(total > 0);
            prop_assert_eq!(cm.accuracy_percent(), cm.trace() as f64 / total as f64 * 100.0);
            for c in 0..5 {
                for v in [cm.precision(c), cm.recall(c), cm.f1(c)] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    struct Table {
        outputs: Vec<Option<usize>>,
        classes: usize,
    }

    impl Predictor for Table {
        fn id(&self) -> String {
            "table".into()
        }
        fn num_classes(&self) -> usize {
            self.classes
        }
        fn predict(&self, path: &Path, clip_id: &str) -> Result<Array1<f64>> {
            let k: usize = clip_id.parse().unwrap();
            match self.outputs[k] {
                Some(c) => Ok(Array1::from_shape_fn(self.classes, |i| if i == c { 0.9 } else { 0.1 / 2.0 })),
                None => Err(Error::corrupt("clip", path, "truncated")),
            }
        }
    }

    fn manifest(labels: &[usize]) -> DatasetManifest {
        DatasetManifest::new(
            labels
                .iter()
                .enumerate()
                .map(|(k, &c)| ClipRecord {
                    clip_id: k.to_string(),
                    path: format!("{k}.pclip").into(),
                    label: ActivityLabel::from_index(c).unwrap(),
                    subject_id: "s".into(),
                    split: Split::Test,
                    variant: Variant::Original,
                })
                .collect(),
        )
    }

    #[test]
    fn evaluate_builds_the_fixture_and_excludes_bad_clips() {
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 1];
        let outputs = vec![Some(0), Some(0), Some(1), Some(1), Some(1), Some(1), Some(0), Some(2), Some(2), Some(2), None];
        let ev = evaluate(&Table { outputs, classes: 3 }, &manifest(&labels)).unwrap();
        assert_eq!(ev.confusion, fixture());
        assert_eq!(ev.report.excluded.len(), 1);
        assert_eq!(ev.report.excluded[0].clip_id, "10");
        assert_eq!(ev.report.evaluated_clips, 10);
        assert_eq!(ev.predictions.len(), 10);
    }

    #[test]
    fn label_outside_predictor_rejected() {
        let t = Table { outputs: vec![Some(0)], classes: 2 };
        assert!(evaluate(&t, &manifest(&[2])).is_err());
    }

    #[test]
    fn emitted_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cm = fixture();
        let report = MetricsReport::from_confusion(&cm, "m", SubDataset::Blurred);
        report_emit(&report, &cm, dir.path()).unwrap();
        assert_eq!(MetricsReport::read(dir.path().join(METRICS_FILE)).unwrap(), report);

        let mut r = csv::Reader::from_path(dir.path().join(CONFUSION_FILE)).unwrap();
        assert_eq!(r.headers().unwrap().len(), 4);
        let sums: Vec<u64> = r
            .records()
            .map(|row| row.unwrap().iter().skip(1).map(|v| v.parse::<u64>().unwrap()).sum())
            .collect();
        assert_eq!(sums, vec![3, 3, 4]);
        let text = std::fs::read_to_string(dir.path().join(F1_FILE)).unwrap();
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn paired_report_has_one_row_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ConfusionMatrix::new(18);
        let mut b = ConfusionMatrix::new(18);
        for c in 0..18 {
            a.counts[c][c] = 3;
            b.counts[c][(c + 1) % 18] = 1;
            b.counts[c][c] = 2;
        }
        let ra = MetricsReport::from_confusion(&a, "m", SubDataset::Original);
        let rb = MetricsReport::from_confusion(&b, "m", SubDataset::Blurred);
        let path = emit_paired_f1(&ra, &rb, dir.path()).unwrap();
        let mut r = csv::Reader::from_path(path).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["label", "f1_original", "f1_blurred"]);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 18);
        assert_eq!(&rows[0][1], "1");
        assert!((rows[0][2].parse::<f64>().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }
}
