//! The activity classifier.
//!
//! Per-frame features (the in-repo [`TinyBackbone`] or precomputed features
//! from a large pretrained network) are projected by a learned linear layer,
//! run through a single-layer bidirectional LSTM, pooled over time (sigmoid
//! frame attention or a plain mean) and classified by a fully connected
//! layer with batch normalization and softmax.
//!
//! Gradients are hand-derived; every layer is checked against central
//! finite differences in the tests.

pub mod backbone;
mod checkpoint;
pub mod layers;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SubDataset;
use crate::error::{Error, Result};
use crate::preprocess::{ClipPreparation, Normalization};
use crate::seed;
use crate::video::FrameSequence;

pub use backbone::{backbone_features, feature_path_for, read_features, write_features, TinyBackbone};
pub use checkpoint::{load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use layers::{framewise_attention, BatchNorm, BiLstm, FrameAttention, Linear, LstmCell};

use backbone::BackboneTrace;
use layers::{softmax, BatchNormTrace, BiLstmTrace, Visit, VisitMut};

pub const TINY_BACKBONE: &str = "tiny_test_backbone";
/// The in-repo backbone's weights are fixed, like a pretrained network's.
const TINY_BACKBONE_SEED: u64 = 0x7419;
/// Samples per work unit when a batch is processed in parallel; fixed so
/// the gradient summation order does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub name: String,
    pub input_resolution: (usize, usize),
    pub raw_feature_dim: usize,
    pub frozen: bool,
    pub normalization: Normalization,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    /// [`TinyBackbone`], evaluated in-process.
    Tiny,
    /// Features read from `.feat` sidecars written by an external extractor.
    Precomputed,
}

impl FeatureExtractorSpec {
    pub fn tiny_test_backbone(resolution: (usize, usize)) -> Self {
        Self {
            name: TINY_BACKBONE.into(),
            input_resolution: resolution,
            raw_feature_dim: TinyBackbone::FEATURE_DIM,
            frozen: true,
            normalization: Normalization {
                mean: [0.5; 3],
                std: [0.25; 3],
            },
        }
    }

    fn pretrained(name: &str, side: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            input_resolution: (side, side),
            raw_feature_dim: dim,
            frozen: true,
            normalization: Normalization::IMAGENET,
        }
    }

    pub fn resnext101() -> Self {
        Self::pretrained("resnext101", 248, 2048)
    }

    pub fn densenet121() -> Self {
        Self::pretrained("densenet121", 512, 1024)
    }

    pub fn wide_resnet101() -> Self {
        Self::pretrained("wide_resnet101", 324, 2048)
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            TINY_BACKBONE => Ok(Self::tiny_test_backbone((32, 32))),
            "resnext101" => Ok(Self::resnext101()),
            "densenet121" => Ok(Self::densenet121()),
            "wide_resnet101" => Ok(Self::wide_resnet101()),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        if self.name == TINY_BACKBONE {
            BackboneKind::Tiny
        } else {
            BackboneKind::Precomputed
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.raw_feature_dim == 0 {
            return Err(Error::Config("raw_feature_dim must be at least 1".into()));
        }
        if self.input_resolution.0 == 0 || self.input_resolution.1 == 0 {
            return Err(Error::Config("input resolution must be positive".into()));
        }
        if self.kind() == BackboneKind::Tiny && self.raw_feature_dim != TinyBackbone::FEATURE_DIM {
            return Err(Error::Config(format!(
                "{TINY_BACKBONE} emits {} features, spec says {}",
                TinyBackbone::FEATURE_DIM,
                self.raw_feature_dim
            )));
        }
        if self.kind() == BackboneKind::Precomputed && !self.frozen {
            return Err(Error::Config(format!(
                "backbone `{}` is only available as precomputed features and cannot be trained",
                self.name
            )));
        }
        self.normalization.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPosition {
    /// Scores the LSTM states and pools them by weighted average.
    #[default]
    PostLstm,
    /// Gates the projected features before the LSTM; states are mean-pooled.
    PreLstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub feature_dim: usize,
    pub lstm_hidden: usize,
    pub bidirectional: bool,
    pub num_classes: usize,
    pub attention: bool,
    pub attention_position: AttentionPosition,
    pub n_frames: usize,
    /// Target mean brightness for per-clip gamma correction; `None` disables it.
    pub gamma_target: Option<f64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            feature_dim: 512,
            lstm_hidden: 1024,
            bidirectional: true,
            num_classes: 18,
            attention: false,
            attention_position: AttentionPosition::PostLstm,
            n_frames: 40,
            gamma_target: Some(0.5),
        }
    }
}

impl ClassifierConfig {
    /// Reduced dimensions for CPU runs on the synthetic dataset.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            feature_dim: 32,
            lstm_hidden: 24,
            num_classes,
            n_frames: 16,
            ..Self::default()
        }
    }

    pub fn lstm_output_dim(&self) -> usize {
        self.lstm_hidden * if self.bidirectional { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.lstm_hidden == 0 || self.n_frames == 0 {
            return Err(Error::Config("feature_dim, lstm_hidden and n_frames must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if let Some(t) = self.gamma_target {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("gamma target {t} not in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub trained_on: Option<SubDataset>,
    pub fine_tuned_on: Option<SubDataset>,
}

/// Model input for one clip.
#[derive(Clone, Debug, PartialEq)]
pub enum ClipInput {
    /// Preprocessed frames at the extractor's input resolution.
    Frames(FrameSequence),
    /// `T × raw_feature_dim` backbone features.
    Features(Array2<f64>),
}

impl ClipInput {
    pub fn len(&self) -> usize {
        match self {
            ClipInput::Frames(s) => s.len(),
            ClipInput::Features(f) => f.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reorders time steps.
    pub fn select(&self, indices: &[usize]) -> ClipInput {
        match self {
            ClipInput::Frames(s) => ClipInput::Frames(s.select(indices)),
            ClipInput::Features(f) => ClipInput::Features(f.select(Axis(0), indices)),
        }
    }
}

/// Every learned tensor of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub backbone: Option<TinyBackbone>,
    pub projection: Linear,
    pub attention: Option<FrameAttention>,
    pub lstm: BiLstm,
    pub head_fc: Linear,
    pub head_bn: BatchNorm,
}

impl Parameters {
    fn init(spec: &FeatureExtractorSpec, config: &ClassifierConfig, seed: u64) -> Self {
        let backbone =
            (spec.kind() == BackboneKind::Tiny).then(|| TinyBackbone::new(&mut seed::rng(TINY_BACKBONE_SEED, &[])));
        let mut rng = seed::rng(seed, &[seed::STREAM_INIT]);
        let projection = Linear::new(spec.raw_feature_dim, config.feature_dim, &mut rng);
        let attention_dim = match config.attention_position {
            AttentionPosition::PostLstm => config.lstm_output_dim(),
            AttentionPosition::PreLstm => config.feature_dim,
        };
        let attention = config.attention.then(|| FrameAttention::new(attention_dim, &mut rng));
        let lstm = BiLstm::new(config.feature_dim, config.lstm_hidden, config.bidirectional, &mut rng);
        let head_fc = Linear::new(config.lstm_output_dim(), config.num_classes, &mut rng);
        Self {
            backbone,
            projection,
            attention,
            lstm,
            head_fc,
            head_bn: BatchNorm::new(config.num_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.as_ref().map(TinyBackbone::zeros_like),
            projection: self.projection.zeros_like(),
            attention: self.attention.as_ref().map(FrameAttention::zeros_like),
            lstm: self.lstm.zeros_like(),
            head_fc: self.head_fc.zeros_like(),
            head_bn: self.head_bn.zeros_like(),
        }
    }

    /// Visits learned tensors in a fixed order, optionally skipping the backbone.
    pub(crate) fn visit<'p>(&'p self, include_backbone: bool, f: Visit<'_, 'p>) {
        if include_backbone {
            if let Some(b) = &self.backbone {
                b.visit("backbone", f);
            }
        }
        self.projection.visit("projection", f);
        if let Some(a) = &self.attention {
            a.visit("attention", f);
        }
        self.lstm.visit("lstm", f);
        self.head_fc.visit("head.fc", f);
        self.head_bn.visit("head.bn", f);
    }

    pub(crate) fn visit_mut(&mut self, include_backbone: bool, f: VisitMut) {
        if include_backbone {
            if let Some(b) = &mut self.backbone {
                b.visit_mut("backbone", f);
            }
        }
        self.projection.visit_mut("projection", f);
        if let Some(a) = &mut self.attention {
            a.visit_mut("attention", f);
        }
        self.lstm.visit_mut("lstm", f);
        self.head_fc.visit_mut("head.fc", f);
        self.head_bn.visit_mut("head.bn", f);
    }

    /// Learned tensors followed by the batch-norm running statistics.
    pub(crate) fn visit_all<'p>(&'p self, f: Visit<'_, 'p>) {
        self.visit(true, f);
        self.head_bn.visit_buffers("head.bn", f);
    }

    pub(crate) fn visit_all_mut(&mut self, f: VisitMut) {
        self.visit_mut(true, f);
        self.head_bn.visit_buffers_mut("head.bn", f);
    }

    fn tensors(&self, include_backbone: bool) -> Vec<&[f64]> {
        let mut out = Vec::new();
        self.visit(include_backbone, &mut |_, t| out.push(t));
        out
    }

    fn add_assign(&mut self, other: &Parameters) {
        let src = other.tensors(true);
        let mut k = 0;
        self.visit_mut(true, &mut |_, dst| {
            for (d, s) in dst.iter_mut().zip(src[k]) {
                *d += s;
            }
            k += 1;
        });
    }

    /// Trainable values flattened in visiting order.
    pub fn flatten(&self, include_backbone: bool) -> Vec<f64> {
        self.tensors(include_backbone).concat()
    }

    pub fn names(&self, include_backbone: bool) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(include_backbone, &mut |n, _| out.push(n.to_string()));
        out
    }

    /// Element count of each tensor, aligned with [`Parameters::names`].
    pub fn sizes(&self, include_backbone: bool) -> Vec<usize> {
        self.tensors(include_backbone).iter().map(|t| t.len()).collect()
    }

    pub fn assign_flat(&mut self, include_backbone: bool, values: &[f64]) -> Result<()> {
        let expected: usize = self.tensors(include_backbone).iter().map(|t| t.len()).sum();
        if expected != values.len() {
            return Err(Error::Shape(format!("expected {expected} values, got {}", values.len())));
        }
        let mut pos = 0;
        self.visit_mut(include_backbone, &mut |_, dst| {
            dst.copy_from_slice(&values[pos..pos + dst.len()]);
            pos += dst.len();
        });
        Ok(())
    }
}

struct SampleTrace {
    backbone: Vec<BackboneTrace>,
    raw: Array2<f64>,
    feats: Array2<f64>,
    pre_scores: Option<Array1<f64>>,
    lstm: BiLstmTrace,
    states: Array2<f64>,
    post_scores: Option<Array1<f64>>,
    clip: Array1<f64>,
}

/// Loss, predictions and summed parameter gradients for one training batch.
pub struct BatchGradient {
    pub loss: f64,
    pub losses: Vec<f64>,
    pub probabilities: Array2<f64>,
    pub gradients: Parameters,
    bn: BatchNormTrace,
    batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: FeatureExtractorSpec,
    pub config: ClassifierConfig,
    pub provenance: Provenance,
    pub params: Parameters,
}

impl TrainedModel {
    pub fn new(spec: FeatureExtractorSpec, config: ClassifierConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let params = Parameters::init(&spec, &config, seed);
        Ok(Self {
            spec,
            config,
            provenance: Provenance::default(),
            params,
        })
    }

    /// Whether an optimizer step may change the backbone.
    pub fn backbone_trainable(&self) -> bool {
        !self.spec.frozen && self.params.backbone.is_some()
    }

    /// Clip preparation matching this model's input contract.
    pub fn preparation(&self) -> ClipPreparation {
        ClipPreparation {
            n_frames: self.config.n_frames,
            gamma_target: self.config.gamma_target,
            resolution: self.spec.input_resolution,
            normalization: self.spec.normalization,
        }
    }

    fn check_input(&self, input: &ClipInput) -> Result<()> {
        if input.is_empty() {
            return Err(Error::Shape("clip has no frames".into()));
        }
        match input {
            ClipInput::Frames(seq) => {
                if self.params.backbone.is_none() {
                    return Err(Error::Shape(format!(
                        "backbone `{}` takes precomputed features, not frames",
                        self.spec.name
                    )));
                }
                if (seq.height(), seq.width()) != self.spec.input_resolution {
                    return Err(Error::Shape(format!(
                        "frames are {}x{}, backbone expects {}x{}",
                        seq.height(),
                        seq.width(),
                        self.spec.input_resolution.0,
                        self.spec.input_resolution.1
                    )));
                }
            }
            ClipInput::Features(f) => {
                if f.ncols() != self.spec.raw_feature_dim {
                    return Err(Error::Shape(format!(
                        "features have {} columns, backbone emits {}",
                        f.ncols(),
                        self.spec.raw_feature_dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// `T × raw_feature_dim` backbone output.
    pub fn raw_features(&self, input: &ClipInput) -> Result<Array2<f64>> {
        self.check_input(input)?;
        Ok(match input {
            ClipInput::Frames(seq) => backbone_features(self.params.backbone.as_ref().unwrap(), seq),
            ClipInput::Features(f) => f.clone(),
        })
    }

    /// `T × feature_dim` projected features.
    pub fn extract_features(&self, input: &ClipInput) -> Result<Array2<f64>> {
        Ok(self.params.projection.forward(&self.raw_features(input)?))
    }

    fn trace(&self, input: &ClipInput, keep_backbone: bool) -> Result<SampleTrace> {
        self.check_input(input)?;
        let p = &self.params;
        let (raw, backbone) = match input {
            ClipInput::Frames(seq) if keep_backbone => {
                let bb = p.backbone.as_ref().unwrap();
                let (rows, traces): (Vec<_>, Vec<_>) = seq.frames().iter().map(|f| bb.forward_trace(f)).unzip();
                let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
                (ndarray::stack(Axis(0), &views).unwrap(), traces)
            }
            _ => (self.raw_features(input)?, Vec::new()),
        };
        let feats = p.projection.forward(&raw);
        let pre = self.config.attention_position == AttentionPosition::PreLstm;
        let (lstm_in, pre_scores) = match (&p.attention, pre) {
            (Some(att), true) => {
                let (g, a) = att.gate(&feats);
                (g, Some(a))
            }
            _ => (feats.clone(), None),
        };
        let (states, lstm) = p.lstm.forward_trace(&lstm_in);
        let (clip, post_scores) = match (&p.attention, pre) {
            (Some(att), false) => {
                let (v, a) = att.pool(&states);
                (v, Some(a))
            }
            _ => (states.mean_axis(Axis(0)).unwrap(), None),
        };
        Ok(SampleTrace {
            backbone,
            raw,
            feats,
            pre_scores,
            lstm,
            states,
            post_scores,
            clip,
        })
    }

    /// `T × lstm_output_dim` recurrent states.
    pub fn states(&self, input: &ClipInput) -> Result<Array2<f64>> {
        Ok(self.trace(input, false)?.states)
    }

    /// Temporally pooled clip representation.
    pub fn clip_vector(&self, input: &ClipInput) -> Result<Array1<f64>> {
        Ok(self.trace(input, false)?.clip)
    }

    /// Evaluation-mode head: batch norm with running statistics.
    pub fn head_eval(&self, clip_vectors: &Array2<f64>) -> Array2<f64> {
        let z = self.params.head_bn.forward_eval(&self.params.head_fc.forward(clip_vectors));
        softmax_rows(&z)
    }

    /// Class probabilities for one clip, in evaluation mode.
    pub fn forward(&self, input: &ClipInput) -> Result<Array1<f64>> {
        let v = self.clip_vector(input)?;
        let probs = self.head_eval(&v.insert_axis(Axis(0)));
        Ok(probs.row(0).to_owned())
    }

    /// [`forward`](Self::forward) over many clips in parallel.
    pub fn forward_many(&self, inputs: &[ClipInput]) -> Result<Vec<Array1<f64>>> {
        inputs.par_iter().map(|c| self.forward(c)).collect()
    }

    /// Training-mode forward and backward pass: mean cross-entropy of the
    /// batch and its gradient with respect to every parameter. Backbone
    /// gradients are only computed when the backbone is trainable.
    pub fn batch_gradient(&self, batch: &[(ClipInput, usize)]) -> Result<BatchGradient> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some((_, y)) = batch.iter().find(|(_, y)| *y >= self.config.num_classes) {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
        let keep = self.backbone_trainable();
        let traces: Vec<SampleTrace> = batch.par_iter().map(|(x, _)| self.trace(x, keep)).collect::<Result<_>>()?;
        let b = batch.len();
        let views: Vec<_> = traces.iter().map(|t| t.clip.view()).collect();
        let v = ndarray::stack(Axis(0), &views).unwrap();

        let p = &self.params;
        let mut grads = p.zeros_like();
        let z = p.head_fc.forward(&v);
        let (y, bn) = p.head_bn.forward_train(&z);
        let probs = softmax_rows(&y);
        let mut losses = Vec::with_capacity(b);
        let mut d_y = Array2::zeros(probs.raw_dim());
        for (i, (_, label)) in batch.iter().enumerate() {
            let row = probs.row(i);
            losses.push(crate::training::cross_entropy(row, *label));
            // The clamped loss is flat below the clamp.
            if row[*label] >= crate::training::PROB_FLOOR {
                let mut d = d_y.row_mut(i);
                d.assign(&(&row / b as f64));
                d[*label] -= 1.0 / b as f64;
            }
        }
        let d_z = p.head_bn.backward(&bn, &d_y, &mut grads.head_bn);
        let d_v = p.head_fc.backward(&v, &d_z, &mut grads.head_fc);

        let work: Vec<(&SampleTrace, ArrayView1<f64>)> = traces.iter().zip(d_v.rows()).collect();
        let partials: Vec<Parameters> = work
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = p.zeros_like();
                for (t, dv) in chunk {
                    self.sample_backward(t, dv, &mut g);
                }
                g
            })
            .collect();
        for part in &partials {
            grads.add_assign(part);
        }
        let loss = losses.iter().sum::<f64>() / b as f64;
        Ok(BatchGradient {
            loss,
            losses,
            probabilities: probs,
            gradients: grads,
            bn,
            batch: b,
        })
    }

    fn sample_backward(&self, tr: &SampleTrace, d_clip: &ArrayView1<f64>, grad: &mut Parameters) {
        let p = &self.params;
        let d_clip = d_clip.to_owned();
        let d_states = match (&p.attention, &tr.post_scores) {
            (Some(att), Some(a)) => {
                att.pool_backward(&tr.states, a, &tr.clip, &d_clip, grad.attention.as_mut().unwrap())
            }
            _ => {
                let t = tr.states.nrows() as f64;
                let row = (&d_clip / t).insert_axis(Axis(0));
                row.broadcast(tr.states.raw_dim()).unwrap().to_owned()
            }
        };
        let d_lstm_in = p.lstm.backward_trace(&tr.lstm, &d_states, &mut grad.lstm);
        let d_feats = match (&p.attention, &tr.pre_scores) {
            (Some(att), Some(a)) => att.gate_backward(&tr.feats, a, &d_lstm_in, grad.attention.as_mut().unwrap()),
            _ => d_lstm_in,
        };
        let d_raw = p.projection.backward(&tr.raw, &d_feats, &mut grad.projection);
        if let (Some(bb), Some(gb)) = (&p.backbone, grad.backbone.as_mut()) {
            for (t, bt) in tr.backbone.iter().enumerate() {
                bb.backward(bt, &d_raw.row(t).to_owned(), gb);
            }
        }
    }

    /// Folds a training batch's statistics into the batch-norm running averages.
    pub fn update_running_statistics(&mut self, batch: &BatchGradient) {
        self.params.head_bn.update_running(&batch.bn, batch.batch);
    }
}

pub(crate) fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(z.raw_dim());
    for (mut o, r) in out.rows_mut().into_iter().zip(z.rows()) {
        o.assign(&softmax(r));
    }
    out
}
