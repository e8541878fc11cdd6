//! The `pava` command line.
//!
//! Settings are resolved as built-in defaults, then the TOML file given with
//! `--config`, then command-line flags; later sources win. Exit codes: 0 on
//! success, 1 on a usage error, 2 on a runtime failure. Progress goes to
//! stderr as `key=value` lines. Every subcommand writes only beneath its
//! `--out` directory.
//!
//! Config file keys (all optional):
//!
//! ```toml
//! seed = 0
//! workers = 4
//!
//! [synth]       # classes, clips_per_class, frames, height, width, fps, subjects, seed
//! [backend]     # kind = "fake" | "file" | "ref", fake_label, detections_dir
//! [backend.external]  # program, args, model_path, channel_order
//! [redact]      # fail_open
//! [redact.classes]    # confidence_threshold, backend_map
//! [redact.blur]       # sigma, kernel_radius, mask_dilation
//! [anomaly]     # window, thresholds
//! [model]       # backbone, resolution = [h, w], classes
//! [model.classifier]  # feature_dim, lstm_hidden, bidirectional, attention, attention_position, n_frames, gamma_target
//! [train]       # epochs, lr0, per_class_in_batch, hflip_prob, weight_decay, grad_clip, cache_clips
//! [train.scheduler]   # patience, factor
//! [data]        # val_fraction, calibration_fraction
//! [ensemble]    # mode = "soft_f1_weighted" | "hard_per_class"
//! ```

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    calibration_split, ingest, split, synth_dataset, DatasetManifest, IngestOptions, SynthConfig,
};
use crate::ensemble::{build_ensemble, EnsembleMember, EnsembleMode, EnsemblePredictor, EnsembleSpec, MemberRef};
use crate::error::{Error, Result};
use crate::eval::{emit_paired_f1, evaluate, report_emit, MetricsReport, ModelPredictor, Predictor};
use crate::labels::class_name;
use crate::model::{
    feature_path_for, load_checkpoint, save_checkpoint, BackboneKind, ClassifierConfig, FeatureExtractorSpec,
    TrainedModel, TINY_BACKBONE,
};
use crate::privacy::{
    open_detector, redact_clip, redact_manifest_with_progress, summarize_anomalies, AnomalySummary, BackendConfig,
    BackendKind, PresenceSeries, RedactOptions,
};
use crate::training::{fine_tune_with_progress, train_with_progress, write_history, EpochRecord, TrainConfig, TrainOutcome};
use crate::video::{read_clip, write_clip, CLIP_EXTENSION};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub synth: SynthConfig,
    pub backend: BackendConfig,
    pub redact: RedactOptions,
    pub anomaly: AnomalyConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ensemble: EnsembleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyConfig {
    pub window: usize,
    pub thresholds: Vec<usize>,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            window: 20,
            thresholds: vec![5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: String,
    pub resolution: Option<(usize, usize)>,
    /// Taken from the training manifest's labels when unset.
    pub classes: Option<usize>,
    pub classifier: ClassifierConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: TINY_BACKBONE.into(),
            resolution: None,
            classes: None,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub val_fraction: f64,
    pub calibration_fraction: f64,
    /// Train and test sizes written by `ingest` and `synth`.
    pub split: Option<(usize, usize)>,
    pub by_subject: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            calibration_fraction: 0.1,
            split: None,
            by_subject: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub mode: EnsembleMode,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Parser, Debug)]
#[command(name = "pava", version, about = "Privacy-aware activity classification for first-person video")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random decision.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for preprocessing and inference.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a manifest from a directory of clips.
    Ingest(IngestArgs),
    /// Generate the synthetic desk-scale dataset.
    Synth(SynthArgs),
    /// Blur sensitive objects in a clip or every clip of a manifest.
    Redact(RedactArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Fine-tune an original-trained classifier on redacted clips.
    Finetune(FinetuneArgs),
    /// Weight member checkpoints by per-class F1 on a calibration manifest.
    EnsembleBuild(EnsembleArgs),
    /// Write class probabilities for clips.
    Predict(PredictArgs),
    /// Score a model or ensemble on a labelled manifest.
    Evaluate(EvaluateArgs),
    /// Compare original-test and blurred-test metrics.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// CSV with header `path,label[,subject_id]`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Clip ids to skip, one per line.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Also write `train.jsonl` and `test.jsonl` with these sizes.
    #[arg(long, value_name = "TRAIN,TEST", value_parser = parse_split)]
    pub split: Option<(usize, usize)>,
    /// Keep each subject's clips on one side of the split.
    #[arg(long)]
    pub by_subject: bool,
}

fn parse_split(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected TRAIN,TEST")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((n(a)?, n(b)?))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub clips_per_class: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendArg {
    Ref,
    Fake,
    File,
}

#[derive(Args, Debug)]
pub struct RedactArgs {
    /// A clip or a `.jsonl` manifest.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Minimum detection confidence.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub fail_open: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Validation manifest; when absent a stratified slice of `--train` is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Start from this checkpoint's weights; optimizer state starts fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Checkpoint trained on original clips.
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest of redacted training clips.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from this fine-tuned checkpoint instead of `--model`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Soft,
    Hard,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// `NAME=CHECKPOINT` or `CHECKPOINT`; repeat once per member.
    #[arg(long = "member", required = true)]
    pub members: Vec<String>,
    /// Held-out manifest used to measure per-class F1.
    #[arg(long, conflicts_with = "train")]
    pub calibration: Option<PathBuf>,
    /// Carve the calibration slice from this training manifest instead.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[group(id = "predictor", required = true, multiple = false, args = ["model", "ensemble"])]
pub struct PredictorArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long, required_unless_present = "input", conflicts_with = "input")]
    pub manifest: Option<PathBuf>,
    /// A single clip.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `metrics.json` from the original test set.
    #[arg(long)]
    pub original: PathBuf,
    /// `metrics.json` from the blurred test set.
    #[arg(long)]
    pub blurred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers {
        if n == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Ingest(a) => cmd_ingest(&cfg, &a),
        Command::Synth(a) => cmd_synth(&cfg, &a),
        Command::Redact(a) => cmd_redact(&cfg, &a),
        Command::Train(a) => cmd_train(&cfg, &a),
        Command::Finetune(a) => cmd_finetune(&cfg, &a),
        Command::EnsembleBuild(a) => cmd_ensemble(&cfg, &a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Report(a) => cmd_report(&a),
    })
}

fn progress(fields: &[(&str, String)]) {
    let line: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("{}", line.join(" "));
}

fn epoch_progress(r: &EpochRecord) {
    progress(&[
        ("event", "epoch".into()),
        ("epoch", r.epoch.to_string()),
        ("train_loss", format!("{:.6}", r.train_loss)),
        ("val_loss", format!("{:.6}", r.val_loss)),
        ("val_acc", format!("{:.4}", r.val_acc)),
        ("lr", r.lr.to_string()),
    ]);
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        })
    }
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::read_jsonl(path)?;
    if m.is_empty() {
        return Err(Error::InvalidArgument(format!("manifest {} has no records", path.display())));
    }
    Ok(m)
}

/// Every clip (or its feature sidecar) must exist before long work starts.
fn check_inputs(manifest: &DatasetManifest, kind: BackboneKind) -> Result<()> {
    for r in &manifest.records {
        match kind {
            BackboneKind::Tiny => require_file(&r.path)?,
            BackboneKind::Precomputed => require_file(&feature_path_for(&r.path))?,
        }
    }
    Ok(())
}

fn write_split(cfg: &RunConfig, a: &SplitArgs, manifest: &DatasetManifest, out: &Path) -> Result<()> {
    let Some((train_n, test_n)) = a.split.or(cfg.data.split) else {
        return Ok(());
    };
    let (train, test) = split(manifest, train_n, test_n, cfg.seed(), a.by_subject || cfg.data.by_subject)?;
    train.write_jsonl(out.join("train.jsonl"))?;
    test.write_jsonl(out.join("test.jsonl"))?;
    progress(&[
        ("event", "split".into()),
        ("train", train.len().to_string()),
        ("test", test.len().to_string()),
    ]);
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig, a: &IngestArgs) -> Result<()> {
    let outcome = ingest(
        &a.root,
        &IngestOptions {
            label_file: a.labels.clone(),
            exclude_file: a.exclude.clone(),
        },
    )?;
    create_out(&a.out)?;
    outcome.manifest.write_jsonl(a.out.join("manifest.jsonl"))?;
    for e in &outcome.errors {
        progress(&[
            ("event", "skipped".into()),
            ("path", e.path.display().to_string()),
            ("reason", format!("{:?}", e.reason)),
        ]);
    }
    if !outcome.errors.is_empty() {
        let path = a.out.join("ingest_errors.csv");
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)?;
        w.write_record(["path", "reason"])?;
        for e in &outcome.errors {
            w.write_record([e.path.display().to_string(), e.reason.clone()])?;
        }
        w.flush().map_err(Error::io(&path))?;
    }
    write_split(cfg, &a.split, &outcome.manifest, &a.out)?;
    progress(&[
        ("event", "done".into()),
        ("records", outcome.manifest.len().to_string()),
        ("skipped", outcome.errors.len().to_string()),
    ]);
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let mut s = cfg.synth.clone();
    if let Some(seed) = cfg.seed {
        s.seed = seed;
    }
    s.classes = a.classes.unwrap_or(s.classes);
    s.clips_per_class = a.clips_per_class.unwrap_or(s.clips_per_class);
    s.frames = a.frames.unwrap_or(s.frames);
    s.height = a.height.unwrap_or(s.height);
    s.width = a.width.unwrap_or(s.width);
    let m = synth_dataset(&s, &a.out)?;
    write_split(cfg, &a.split, &m, &a.out)?;
    progress(&[("event", "done".into()), ("records", m.len().to_string())]);
    Ok(())
}

#[derive(Serialize)]
struct AnomalyFile<'a> {
    summaries: Vec<AnomalySummary>,
    failed_frames: Vec<FailedFrames<'a>>,
}

#[derive(Serialize)]
struct FailedFrames<'a> {
    clip_id: &'a str,
    frames: &'a [usize],
}

#[derive(Serialize)]
struct PresenceLine<'a> {
    clip_id: &'a str,
    #[serde(flatten)]
    presence: &'a PresenceSeries,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::io(path))
}

fn cmd_redact(cfg: &RunConfig, a: &RedactArgs) -> Result<()> {
    let mut backend = cfg.backend.clone();
    if let Some(b) = a.backend {
        backend.kind = match b {
            BackendArg::Ref => BackendKind::Ref,
            BackendArg::Fake => BackendKind::Fake,
            BackendArg::File => BackendKind::File,
        };
    }
    let mut opts = cfg.redact.clone();
    if let Some(s) = a.sigma {
        opts.blur.sigma = s;
    }
    if let Some(t) = a.threshold {
        opts.classes.confidence_threshold = t;
    }
    opts.fail_open |= a.fail_open;
    opts.classes.validate()?;
    opts.blur.validate()?;
    require_file(&a.input)?;
    create_out(&a.out)?;

    let is_manifest = a.input.extension().is_some_and(|e| e == "jsonl");
    let (presence, failed): (Vec<(String, PresenceSeries)>, Vec<(String, Vec<usize>)>) = if is_manifest {
        let manifest = read_manifest(&a.input)?;
        check_inputs(&manifest, BackboneKind::Tiny)?;
        let total = manifest.len();
        let done = redact_manifest_with_progress(&manifest, &backend, &opts, &a.out, &mut |i, c| {
            progress(&[
                ("event", "clip".into()),
                ("index", (i + 1).to_string()),
                ("of", total.to_string()),
                ("clip_id", c.clip_id.clone()),
                ("failed_frames", c.failed_frames.len().to_string()),
            ])
        })?;
        done.clips
            .into_iter()
            .map(|c| ((c.clip_id.clone(), c.presence), (c.clip_id, c.failed_frames)))
            .unzip()
    } else {
        let seq = read_clip(&a.input)?;
        let detector = open_detector(&backend, &a.input)?;
        let red = redact_clip(&seq, detector.as_ref(), &opts)?;
        let stem = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        write_clip(a.out.join(format!("{stem}.{CLIP_EXTENSION}")), &red.frames)?;
        (vec![(stem.clone(), red.presence)], vec![(stem, red.failed_frames)])
    };

    let series: Vec<&PresenceSeries> = presence.iter().map(|(_, p)| p).collect();
    let summaries = summarize_anomalies(&series, cfg.anomaly.window, &cfg.anomaly.thresholds)?;
    for s in &summaries {
        progress(&[
            ("event", "anomaly".into()),
            ("threshold", s.threshold.to_string()),
            ("anomaly_frame_count", s.anomaly_frame_count.to_string()),
            ("accuracy_percent", format!("{:.4}", s.accuracy_percent)),
        ]);
    }
    write_json(
        &a.out.join("anomaly.json"),
        &AnomalyFile {
            summaries,
            failed_frames: failed
                .iter()
                .filter(|(_, f)| !f.is_empty())
                .map(|(id, f)| FailedFrames { clip_id: id, frames: f })
                .collect(),
        },
    )?;
    let mut lines = String::new();
    for (id, p) in &presence {
        lines.push_str(&serde_json::to_string(&PresenceLine { clip_id: id, presence: p })?);
        lines.push('\n');
    }
    let path = a.out.join("presence.jsonl");
    std::fs::write(&path, lines).map_err(Error::io(&path))
}

fn model_for(cfg: &RunConfig, train: &DatasetManifest) -> Result<TrainedModel> {
    let m = &cfg.model;
    let mut spec = FeatureExtractorSpec::from_name(&m.backbone)?;
    if let Some(r) = m.resolution {
        spec.input_resolution = r;
    }
    let mut classifier = m.classifier.clone();
    classifier.num_classes = match m.classes {
        Some(c) => c,
        None => train.records.iter().map(|r| r.label.index() + 1).max().unwrap_or(0),
    };
    TrainedModel::new(spec, classifier, cfg.seed())
}

fn train_config(cfg: &RunConfig, epochs: Option<usize>, lr: Option<f64>) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = cfg.seed();
    t.epochs = epochs.unwrap_or(t.epochs);
    t.lr0 = lr.unwrap_or(t.lr0);
    t
}

/// `(train, val)`: the given validation manifest, or a held-out slice of
/// the training manifest written to `out`.
fn train_and_val(cfg: &RunConfig, train: &Path, val: Option<&Path>, out: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let train = read_manifest(train)?;
    match val {
        Some(v) => Ok((train, read_manifest(v)?)),
        None => {
            let (rest, held) = calibration_split(&train, cfg.data.val_fraction, cfg.seed())?;
            if held.is_empty() {
                return Err(Error::InvalidArgument(
                    "training manifest too small to hold out a validation slice; pass --val".into(),
                ));
            }
            rest.write_jsonl(out.join("train.jsonl"))?;
            held.write_jsonl(out.join("val.jsonl"))?;
            Ok((rest, held))
        }
    }
}

fn write_outcome(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(&outcome.best, out.join("model.ckpt"))?;
    save_checkpoint(&outcome.last, out.join("last.ckpt"))?;
    write_history(out.join("history.csv"), &outcome.history)?;
    progress(&[
        ("event", "done".into()),
        ("best_epoch", outcome.best_epoch.map_or("none".into(), |e| e.to_string())),
        ("epochs", outcome.history.len().to_string()),
    ]);
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let tc = train_config(cfg, a.epochs, a.lr);
    tc.validate()?;
    if let Some(r) = &a.resume {
        require_file(r)?;
    }
    create_out(&a.out)?;
    let (train, val) = train_and_val(cfg, &a.train, a.val.as_deref(), &a.out)?;
    let model = match &a.resume {
        Some(p) => load_checkpoint(p)?,
        None => model_for(cfg, &train)?,
    };
    check_inputs(&train, model.spec.kind())?;
    check_inputs(&val, model.spec.kind())?;
    let outcome = train_with_progress(model, &train, &val, &tc, &mut epoch_progress)?;
    write_outcome(&a.out, &outcome)
}

fn cmd_finetune(cfg: &RunConfig, a: &FinetuneArgs) -> Result<()> {
    let tc = train_config(cfg, a.epochs, a.lr);
    tc.validate()?;
    require_file(&a.model)?;
    if let Some(r) = &a.resume {
        require_file(r)?;
    }
    create_out(&a.out)?;
    let (train, val) = train_and_val(cfg, &a.train, a.val.as_deref(), &a.out)?;
    let model = load_checkpoint(a.resume.as_ref().unwrap_or(&a.model))?;
    check_inputs(&train, model.spec.kind())?;
    check_inputs(&val, model.spec.kind())?;
    let outcome = fine_tune_with_progress(&model, &train, &val, &tc, &mut epoch_progress)?;
    write_outcome(&a.out, &outcome)
}

fn parse_member(arg: &str) -> MemberRef {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => MemberRef {
            name: name.into(),
            checkpoint: path.into(),
        },
        _ => {
            let path = PathBuf::from(arg);
            let name = path
                .parent()
                .and_then(|p| p.file_name())
                .or_else(|| path.file_stem())
                .map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            MemberRef { name, checkpoint: path }
        }
    }
}

fn cmd_ensemble(cfg: &RunConfig, a: &EnsembleArgs) -> Result<()> {
    let refs: Vec<MemberRef> = a.members.iter().map(|m| parse_member(m)).collect();
    for r in &refs {
        require_file(&r.checkpoint)?;
    }
    create_out(&a.out)?;
    let calibration = match (&a.calibration, &a.train) {
        (Some(c), _) => read_manifest(c)?,
        (None, Some(t)) => {
            let (_, held) = calibration_split(&read_manifest(t)?, cfg.data.calibration_fraction, cfg.seed())?;
            held.write_jsonl(a.out.join("calibration.jsonl"))?;
            held
        }
        (None, None) => return Err(Error::InvalidArgument("pass --calibration or --train".into())),
    };
    let members = refs
        .into_iter()
        .map(|r| {
            let model = load_checkpoint(&r.checkpoint)?;
            check_inputs(&calibration, model.spec.kind())?;
            let checkpoint = std::fs::canonicalize(&r.checkpoint).map_err(Error::io(&r.checkpoint))?;
            Ok(EnsembleMember {
                reference: MemberRef { checkpoint, ..r },
                model,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mode = match a.mode {
        Some(ModeArg::Soft) => EnsembleMode::SoftF1Weighted,
        Some(ModeArg::Hard) => EnsembleMode::HardPerClass,
        None => cfg.ensemble.mode,
    };
    let spec = build_ensemble(&members, &calibration, mode)?;
    for (m, row) in spec.members.iter().zip(&spec.f1_matrix) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        progress(&[
            ("event", "member".into()),
            ("name", m.name.clone()),
            ("macro_f1", format!("{mean:.4}")),
        ]);
    }
    spec.write(a.out.join("ensemble.json"))
}

fn with_predictor<R>(p: &PredictorArgs, f: impl FnOnce(&dyn Predictor, Option<&EnsemblePredictor>) -> Result<R>) -> Result<R> {
    match (&p.model, &p.ensemble) {
        (Some(m), _) => {
            require_file(m)?;
            let model = load_checkpoint(m)?;
            let id = m.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            f(&ModelPredictor::new(&model, id), None)
        }
        (None, Some(e)) => {
            require_file(e)?;
            let ens = EnsemblePredictor::load(EnsembleSpec::read(e)?)?;
            f(&ens, Some(&ens))
        }
        (None, None) => Err(Error::InvalidArgument("pass --model or --ensemble".into())),
    }
}

#[derive(Serialize)]
struct PredictionLine {
    clip_id: String,
    predicted: String,
    probabilities: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    member_probabilities: Option<Vec<Vec<f64>>>,
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let clips: Vec<(String, PathBuf)> = match (&a.manifest, &a.input) {
        (Some(m), _) => read_manifest(m)?
            .records
            .into_iter()
            .map(|r| (r.clip_id, r.path))
            .collect(),
        (None, Some(p)) => {
            let id = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            vec![(id, p.clone())]
        }
        (None, None) => return Err(Error::InvalidArgument("pass --manifest or --in".into())),
    };
    create_out(&a.out)?;
    with_predictor(&a.predictor, |predictor, ensemble| {
        let mut text = String::new();
        for (id, path) in &clips {
            let (probabilities, members) = match ensemble {
                Some(e) => {
                    let p = e.predict_full(path, id)?;
                    let rows = p.per_member_probabilities.rows().into_iter().map(|r| r.to_vec()).collect();
                    (p.probabilities, Some(rows))
                }
                None => (predictor.predict(path, id)?, None),
            };
            let line = PredictionLine {
                clip_id: id.clone(),
                predicted: class_name(crate::training::argmax(probabilities.view())),
                probabilities: probabilities.to_vec(),
                member_probabilities: members,
            };
            text.push_str(&serde_json::to_string(&line)?);
            text.push('\n');
        }
        let path = a.out.join("predictions.jsonl");
        std::fs::write(&path, text).map_err(Error::io(&path))?;
        progress(&[("event", "done".into()), ("clips", clips.len().to_string())]);
        Ok(())
    })
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    create_out(&a.out)?;
    with_predictor(&a.predictor, |predictor, _| {
        let ev = evaluate(predictor, &manifest)?;
        report_emit(&ev.report, &ev.confusion, &a.out)?;
        progress(&[
            ("event", "done".into()),
            ("sub_dataset", ev.report.sub_dataset.to_string()),
            ("accuracy_percent", format!("{:.4}", ev.report.accuracy_percent)),
            ("macro_f1", format!("{:.4}", ev.report.macro_avg.f1.mean)),
            ("excluded", ev.report.excluded.len().to_string()),
        ]);
        Ok(())
    })
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let original = MetricsReport::read(&a.original)?;
    let blurred = MetricsReport::read(&a.blurred)?;
    create_out(&a.out)?;
    emit_paired_f1(&original, &blurred, &a.out)?;
    let path = a.out.join("summary.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)?;
    w.write_record([
        "test_set",
        "model_id",
        "accuracy_percent",
        "precision",
        "precision_std",
        "recall",
        "recall_std",
        "f1",
        "f1_std",
    ])?;
    for (set, r) in [("original", &original), ("blurred", &blurred)] {
        let m = &r.macro_avg;
        w.write_record([
            set.to_string(),
            r.model_id.clone(),
            r.accuracy_percent.to_string(),
            m.precision.mean.to_string(),
            m.precision.std.to_string(),
            m.recall.mean.to_string(),
            m.recall.std.to_string(),
            m.f1.mean.to_string(),
            m.f1.std.to_string(),
        ])?;
    }
    w.flush().map_err(Error::io(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["pava", "frobnicate"]), 1);
        assert_eq!(run(["pava", "synth", "--bogus", "1", "--out", "x"]), 1);
        assert_eq!(run(["pava", "evaluate", "--manifest", "m.jsonl", "--out", "r"]), 1);
        assert_eq!(run(["pava", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.ckpt");
        let code = run([
            "pava".into(),
            "evaluate".into(),
            "--model".into(),
            missing.into_os_string(),
            "--manifest".into(),
            dir.path().join("m.jsonl").into_os_string(),
            "--out".into(),
            dir.path().join("r").into_os_string(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn config_keys_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            [model]
            backbone = "tiny_test_backbone"
            resolution = [32, 32]
            [model.classifier]
            feature_dim = 32
            lstm_hidden = 24
            n_frames = 16
            [train]
            epochs = 3
            [train.scheduler]
            patience = 2
            [redact.blur]
            sigma = 4.0
            [redact.classes]
            confidence_threshold = 0.7
            [data]
            split = [30, 10]
            [ensemble]
            mode = "hard_per_class"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.model.resolution, Some((32, 32)));
        assert_eq!(cfg.model.classifier.lstm_hidden, 24);
        assert_eq!(cfg.train.scheduler.patience, 2);
        assert_eq!(cfg.redact.blur.sigma, 4.0);
        assert_eq!(cfg.ensemble.mode, EnsembleMode::HardPerClass);
        assert_eq!(cfg.redact.classes.confidence_threshold, 0.7);
        assert!(!cfg.redact.classes.backend_map.is_empty());
        assert_eq!(cfg.data.split, Some((30, 10)));
        assert!(toml::from_str::<RunConfig>("unknown = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[redact.blur]\nsigm = 3.0").is_err());
    }

    #[test]
    fn member_names() {
        assert_eq!(parse_member("a=x/y.ckpt").name, "a");
        assert_eq!(parse_member("runs/orig/model.ckpt").name, "orig");
    }
}
