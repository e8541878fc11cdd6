//! Per-class F1-weighted ensembles of trained models.
//!
//! An ensemble file is JSON:
//! `{"version": 1, "mode": "soft_f1_weighted" | "hard_per_class",
//!   "members": [{"name": ..., "checkpoint": ...}], "f1_matrix": [[...]]}`.
//! Relative checkpoint paths are resolved against the file's directory.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, SubDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ModelPredictor, Predictor};
use crate::labels::{class_name, ActivityLabel};
use crate::loader::ClipLoader;
use crate::model::{load_checkpoint, ClassifierConfig, FeatureExtractorSpec, TrainedModel};
use crate::training::argmax;

pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// `p[c] ∝ Σ_m w[m][c]·p_m[c]`.
    #[default]
    SoftF1Weighted,
    /// `p[c] ∝ p_k[c]` where `k` has the highest F1 on class `c`.
    HardPerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberRef {
    pub name: String,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub version: u32,
    pub mode: EnsembleMode,
    pub members: Vec<MemberRef>,
    /// Row per member, column per class.
    pub f1_matrix: Vec<Vec<f64>>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<MemberRef>, f1_matrix: Vec<Vec<f64>>, mode: EnsembleMode) -> Result<Self> {
        let spec = Self {
            version: ENSEMBLE_VERSION,
            mode,
            members,
            f1_matrix,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_classes(&self) -> usize {
        self.f1_matrix.first().map_or(0, Vec::len)
    }

    pub fn f1_array(&self) -> Array2<f64> {
        let (m, c) = (self.f1_matrix.len(), self.num_classes());
        Array2::from_shape_fn((m, c), |(i, j)| self.f1_matrix[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ENSEMBLE_VERSION {
            return Err(Error::Config(format!("unsupported ensemble version {}", self.version)));
        }
        if self.members.is_empty() {
            return Err(Error::Config("ensemble has no members".into()));
        }
        if self.f1_matrix.len() != self.members.len() {
            return Err(Error::Shape(format!(
                "f1_matrix has {} rows for {} members",
                self.f1_matrix.len(),
                self.members.len()
            )));
        }
        let c = self.num_classes();
        if c == 0 || self.f1_matrix.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("f1_matrix rows must share a non-zero length".into()));
        }
        if let Some(v) = self.f1_matrix.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("F1 value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Stores checkpoint paths relative to the file when they lie beneath it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = self.clone();
        for m in &mut out.members {
            if let Ok(rel) = m.checkpoint.strip_prefix(base) {
                m.checkpoint = rel.to_path_buf();
            }
        }
        let mut json = serde_json::to_string_pretty(&out)?;
        json.push('\n');
        std::fs::write(path, json).map_err(Error::io(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        let base = path.parent().unwrap_or(Path::new(""));
        for m in &mut spec.members {
            if m.checkpoint.is_relative() {
                m.checkpoint = base.join(&m.checkpoint);
            }
        }
        Ok(spec)
    }
}

/// Column-normalized F1: `w[m][c] = f1[m][c] / Σ_m' f1[m'][c]`.
pub fn compute_weights(f1: &Array2<f64>) -> Result<Array2<f64>> {
    if let Some(v) = f1.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("F1 value {v} outside [0, 1]")));
    }
    let mut w = f1.clone();
    for (c, mut col) in w.axis_iter_mut(Axis(1)).enumerate() {
        let sum: f64 = col.iter().sum();
        if sum == 0.0 {
            return Err(Error::ZeroF1Column(class_name(c)));
        }
        col.mapv_inplace(|v| v / sum);
    }
    Ok(w)
}

/// Combines `M × C` member probabilities. A combination with zero mass
/// falls back to the uniform distribution.
pub fn combine(per_member: &Array2<f64>, weights: &Array2<f64>, mode: EnsembleMode) -> Result<Array1<f64>> {
    if per_member.dim() != weights.dim() || per_member.nrows() == 0 {
        return Err(Error::Shape(format!(
            "member probabilities {:?} and weights {:?}",
            per_member.dim(),
            weights.dim()
        )));
    }
    let (m, c) = per_member.dim();
    let mut p = Array1::zeros(c);
    for j in 0..c {
        p[j] = match mode {
            EnsembleMode::SoftF1Weighted => {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += weights[[i, j]] * per_member[[i, j]];
                }
                acc
            }
            EnsembleMode::HardPerClass => per_member[[argmax(weights.column(j)), j]],
        };
    }
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.mapv_inplace(|v| v / total);
    } else {
        p.fill(1.0 / c as f64);
    }
    Ok(p)
}

#[derive(Clone, Debug)]
pub struct EnsemblePrediction {
    pub probabilities: Array1<f64>,
    pub per_member_probabilities: Array2<f64>,
    pub chosen_label: ActivityLabel,
}

pub struct EnsemblePredictor {
    spec: EnsembleSpec,
    weights: Array2<f64>,
    members: Vec<(TrainedModel, ClipLoader)>,
}

impl EnsemblePredictor {
    pub fn new(spec: EnsembleSpec, models: Vec<TrainedModel>) -> Result<Self> {
        spec.validate()?;
        if models.len() != spec.members.len() {
            return Err(Error::Shape(format!(
                "{} models for {} ensemble members",
                models.len(),
                spec.members.len()
            )));
        }
        let c = spec.num_classes();
        if let Some(m) = models.iter().find(|m| m.config.num_classes != c) {
            return Err(Error::Shape(format!(
                "member predicts {} classes, ensemble expects {c}",
                m.config.num_classes
            )));
        }
        let weights = compute_weights(&spec.f1_array())?;
        let members = models
            .into_iter()
            .map(|m| {
                let loader = ClipLoader::for_model(&m, false);
                (m, loader)
            })
            .collect();
        Ok(Self { spec, weights, members })
    }

    /// Loads every member checkpoint named by `spec`.
    pub fn load(spec: EnsembleSpec) -> Result<Self> {
        let models = spec
            .members
            .iter()
            .map(|m| load_checkpoint(&m.checkpoint))
            .collect::<Result<Vec<_>>>()?;
        Self::new(spec, models)
    }

    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn predict_full(&self, path: &Path, clip_id: &str) -> Result<EnsemblePrediction> {
        let rows: Vec<Array1<f64>> = self
            .members
            .par_iter()
            .map(|(model, loader)| model.forward(&loader.load_eval(path, clip_id)?))
            .collect::<Result<_>>()?;
        let c = self.spec.num_classes();
        let per_member = Array2::from_shape_fn((rows.len(), c), |(i, j)| rows[i][j]);
        let probabilities = combine(&per_member, &self.weights, self.spec.mode)?;
        let chosen = argmax(probabilities.view());
        Ok(EnsemblePrediction {
            chosen_label: ActivityLabel::from_index(chosen).expect("class index within label range"),
            probabilities,
            per_member_probabilities: per_member,
        })
    }
}

impl Predictor for EnsemblePredictor {
    fn id(&self) -> String {
        let names: Vec<&str> = self.spec.members.iter().map(|m| m.name.as_str()).collect();
        format!("ensemble[{}]", names.join(","))
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    fn predict(&self, path: &Path, clip_id: &str) -> Result<Array1<f64>> {
        Ok(self.predict_full(path, clip_id)?.probabilities)
    }
}

/// A model together with where its checkpoint lives.
#[derive(Clone, Debug)]
pub struct EnsembleMember {
    pub reference: MemberRef,
    pub model: TrainedModel,
}

/// Fills the F1 matrix by evaluating every member on `calibration`.
pub fn build_ensemble(members: &[EnsembleMember], calibration: &DatasetManifest, mode: EnsembleMode) -> Result<EnsembleSpec> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("no ensemble members".into()));
    }
    if calibration.is_empty() {
        return Err(Error::InvalidArgument("calibration manifest is empty".into()));
    }
    let mut f1 = Vec::with_capacity(members.len());
    for m in members {
        let ev = evaluate(&ModelPredictor::new(&m.model, m.reference.name.clone()), calibration)?;
        if let Some(x) = ev.report.excluded.first() {
            return Err(Error::InvalidArgument(format!(
                "member `{}` could not evaluate calibration clip `{}`: {}",
                m.reference.name, x.clip_id, x.reason
            )));
        }
        f1.push(ev.report.f1_vector());
    }
    let spec = EnsembleSpec::new(members.iter().map(|m| m.reference.clone()).collect(), f1, mode)?;
    compute_weights(&spec.f1_array())?;
    Ok(spec)
}

/// Four original-trained members plus their four blurred fine-tuned
/// counterparts, combined in soft mode.
pub fn build_final_ensemble(
    original: &[EnsembleMember],
    fine_tuned: &[EnsembleMember],
    calibration: &DatasetManifest,
) -> Result<EnsembleSpec> {
    if original.len() != 4 || fine_tuned.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "expected 4 original and 4 fine-tuned members, got {} and {}",
            original.len(),
            fine_tuned.len()
        )));
    }
    if let Some(m) = original.iter().find(|m| m.model.provenance.trained_on != Some(SubDataset::Original)) {
        return Err(Error::InvalidArgument(format!("member `{}` was not trained on original clips", m.reference.name)));
    }
    if let Some(m) = fine_tuned.iter().find(|m| m.model.provenance.fine_tuned_on != Some(SubDataset::Blurred)) {
        return Err(Error::InvalidArgument(format!("member `{}` was not fine-tuned on blurred clips", m.reference.name)));
    }
    let all: Vec<EnsembleMember> = original.iter().chain(fine_tuned).cloned().collect();
    build_ensemble(&all, calibration, EnsembleMode::SoftF1Weighted)
}

#[derive(Clone, Debug)]
pub struct ReferenceMember {
    pub name: &'static str,
    pub spec: FeatureExtractorSpec,
    pub config: ClassifierConfig,
}

/// The four architectures of the published ensemble.
pub fn reference_members() -> Vec<ReferenceMember> {
    let plain = ClassifierConfig::default();
    let attended = ClassifierConfig {
        attention: true,
        ..ClassifierConfig::default()
    };
    vec![
        ReferenceMember {
            name: "resnext101",
            spec: FeatureExtractorSpec::resnext101(),
            config: plain.clone(),
        },
        ReferenceMember {
            name: "densenet121",
            spec: FeatureExtractorSpec::densenet121(),
            config: plain.clone(),
        },
        ReferenceMember {
            name: "wide_resnet101",
            spec: FeatureExtractorSpec::wide_resnet101(),
            config: plain,
        },
        ReferenceMember {
            name: "wide_resnet101_attention",
            spec: FeatureExtractorSpec::wide_resnet101(),
            config: attended,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Plain-loop reference for soft combination.
    fn oracle_soft(p: &[Vec<f64>], f1: &[Vec<f64>]) -> Vec<f64> {
        let (m, c) = (p.len(), p[0].len());
        let mut out = vec![0.0; c];
        for j in 0..c {
            let mut col = 0.0;
            for i in 0..m {
                col += f1[i][j];
            }
            let mut acc = 0.0;
            for i in 0..m {
                acc += (f1[i][j] / col) * p[i][j];
            }
            out[j] = acc;
        }
        let mut total = 0.0;
        for v in &out {
            total += v;
        }
        out.iter().map(|v| v / total).collect()
    }

    fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
    }

    fn distribution(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    #[test]
    fn two_member_weights() {
        let w = compute_weights(&array![[0.8, 0.5], [0.2, 0.5]]).unwrap();
        assert!((w[[0, 0]] - 0.8).abs() < 1e-15 && (w[[1, 0]] - 0.2).abs() < 1e-15);
        assert_eq!(w.column(1).to_vec(), vec![0.5, 0.5]);
        let single = compute_weights(&array![[0.3, 0.9, 0.1]]).unwrap();
        assert!(single.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_column_names_the_class() {
        match compute_weights(&array![[0.5, 0.0], [0.5, 0.0]]) {
            Err(Error::ZeroF1Column(name)) => assert_eq!(name, class_name(1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hand_computed_two_member_combination() {
        let mut pa = vec![0.0; 18];
        let mut pb = vec![0.0; 18];
        pa[0] = 0.6;
        pa[1] = 0.4;
        pb[0] = 0.2;
        pb[2] = 0.8;
        let mut fa = vec![0.5; 18];
        let mut fb = vec![0.5; 18];
        fa[0] = 0.9;
        fb[0] = 0.3;
        fa[2] = 0.2;
        fb[2] = 0.6;
        let w = compute_weights(&to_array(&[fa, fb])).unwrap();
        let p = combine(&to_array(&[pa, pb]), &w, EnsembleMode::SoftF1Weighted).unwrap();
        // Unnormalized: 0.75·0.6 + 0.25·0.2 = 0.5; 0.5·0.4 = 0.2; 0.75·0.8 = 0.6.
        let total = 0.5 + 0.2 + 0.6;
        assert!((p[0] - 0.5 / total).abs() < 1e-12);
        assert!((p[1] - 0.2 / total).abs() < 1e-12);
        assert!((p[2] - 0.6 / total).abs() < 1e-12);
        assert!(p.iter().skip(3).all(|&v| v == 0.0));
    }

    #[test]
    fn hard_mode_takes_best_member_per_class() {
        let probs = array![[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]];
        let f1 = array![[0.9, 0.9, 0.1], [0.1, 0.2, 0.9]];
        let p = combine(&probs, &compute_weights(&f1).unwrap(), EnsembleMode::HardPerClass).unwrap();
        let raw = [0.7, 0.2, 0.8];
        let total: f64 = raw.iter().sum();
        for c in 0..3 {
            assert!((p[c] - raw[c] / total).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_mass_is_uniform() {
        let p = combine(&array![[1.0, 0.0], [1.0, 0.0]], &array![[0.0, 0.5], [0.0, 0.5]], EnsembleMode::SoftF1Weighted).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(combine(&array![[0.5, 0.5]], &array![[1.0, 1.0, 1.0]], EnsembleMode::SoftF1Weighted).is_err());
    }

    #[test]
    fn reference_resolutions() {
        let r = reference_members();
        let got: Vec<(&str, (usize, usize), bool)> =
            r.iter().map(|m| (m.name, m.spec.input_resolution, m.config.attention)).collect();
        assert_eq!(
            got,
            vec![
                ("resnext101", (248, 248), false),
                ("densenet121", (512, 512), false),
                ("wide_resnet101", (324, 324), false),
                ("wide_resnet101_attention", (324, 324), true),
            ]
        );
    }

    #[test]
    fn spec_file_round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let members = vec![
            MemberRef {
                name: "a".into(),
                checkpoint: dir.path().join("a/model.ckpt"),
            },
            MemberRef {
                name: "b".into(),
                checkpoint: "/elsewhere/b.ckpt".into(),
            },
        ];
        let spec = EnsembleSpec::new(members, vec![vec![0.5, 1.0], vec![0.25, 0.0]], EnsembleMode::HardPerClass).unwrap();
        let path = dir.path().join("ensemble.json");
        spec.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"a/model.ckpt\""));
        assert_eq!(EnsembleSpec::read(&path).unwrap(), spec);
    }

    #[test]
    fn invalid_specs_rejected() {
        let m = |n: &str| MemberRef {
            name: n.into(),
            checkpoint: "x".into(),
        };
        assert!(EnsembleSpec::new(vec![m("a")], vec![vec![0.5], vec![0.5]], EnsembleMode::default()).is_err());
        assert!(EnsembleSpec::new(vec![m("a")], vec![vec![1.5]], EnsembleMode::default()).is_err());
        assert!(EnsembleSpec::new(vec![], vec![], EnsembleMode::default()).is_err());
    }

    proptest! {
        #[test]
        fn matches_direct_summation(
            (p, f1) in (1usize..=3, 1usize..=4).prop_flat_map(|(m, c)| (
                prop::collection::vec(distribution(c), m),
                prop::collection::vec(prop::collection::vec(0.05f64..1.0, c), m),
            ))
        ) {
            let w = compute_weights(&to_array(&f1)).unwrap();
            for col in w.axis_iter(Axis(1)) {
                prop_assert!((col.sum() - 1.0).abs() < 1e-9);
            }
            let got = combine(&to_array(&p), &w, EnsembleMode::SoftF1Weighted).unwrap();
            prop_assert_eq!(got.to_vec(), oracle_soft(&p, &f1));
        }

        #[test]
        fn identical_members_keep_the_argmax(p in distribution(18), f1 in prop::collection::vec(prop::collection::vec(0.05f64..1.0, 18), 1..=8)) {
            let m = f1.len();
            let probs = to_array(&vec![p.clone(); m]);
            let w = compute_weights(&to_array(&f1)).unwrap();
            let want = argmax(Array1::from(p.clone()).view());
            for mode in [EnsembleMode::SoftF1Weighted, EnsembleMode::HardPerClass] {
                let out = combine(&probs, &w, mode).unwrap();
                prop_assert_eq!(argmax(out.view()), want);
                prop_assert!((out.sum() - 1.0).abs() < 1e-12);
            }
            if m == 1 {
                let out = combine(&probs, &w, EnsembleMode::SoftF1Weighted).unwrap();
                for (a, b) in out.iter().zip(&p) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn null_member_changes_nothing(
            p in prop::collection::vec(distribution(4), 3),
            f1 in prop::collection::vec(prop::collection::vec(0.05f64..1.0, 4), 2),
            mode in prop_oneof![Just(EnsembleMode::SoftF1Weighted), Just(EnsembleMode::HardPerClass)],
        ) {
            let without = combine(&to_array(&p[..2]), &compute_weights(&to_array(&f1)).unwrap(), mode).unwrap();
            let mut f1z = f1.clone();
            f1z.push(vec![0.0; 4]);
            let with = combine(&to_array(&p), &compute_weights(&to_array(&f1z)).unwrap(), mode).unwrap();
            prop_assert_eq!(argmax(with.view()), argmax(without.view()));
            prop_assert_eq!(with.to_vec(), without.to_vec());
        }

        #[test]
        fn raising_a_stronger_members_f1_never_lowers_its_class(
            p in prop::collection::vec(distribution(4), 2),
            f1 in prop::collection::vec(prop::collection::vec(0.05f64..0.9, 4), 2),
            c in 0usize..4,
            bump in 0.0f64..0.1,
        ) {
            let a = if p[0][c] >= p[1][c] { 0 } else { 1 };
            let base = combine(&to_array(&p), &compute_weights(&to_array(&f1)).unwrap(), EnsembleMode::SoftF1Weighted).unwrap();
            let mut raised = f1.clone();
            raised[a][c] += bump;
            let after = combine(&to_array(&p), &compute_weights(&to_array(&raised)).unwrap(), EnsembleMode::SoftF1Weighted).unwrap();
            prop_assert!(after[c] >= base[c] - 1e-15);
        }
    }
}
