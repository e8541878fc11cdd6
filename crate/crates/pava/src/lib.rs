//! Privacy-aware activity classification for first-person video.
//!
//! The pipeline redacts sensitive objects (screens, phones, people, ...) by
//! compositing a Gaussian blur through instance masks, then classifies the
//! activity in a clip with a recurrent network: per-frame features, a
//! bidirectional LSTM, optional frame-wise sigmoid attention and a
//! batch-normalized softmax head. Members trained on original video and
//! fine-tuned on redacted video are combined by per-class F1 weighting.
//!
//! Everything runs CPU-only at desk scale on the synthetic generator in
//! [`dataset::synth_dataset`]; see the crate's `examples/` directory for one
//! runnable program per capability.

pub mod error;
pub mod labels;
pub mod mask;
pub mod seed;
pub mod video;

pub mod cli;
pub mod dataset;
pub mod ensemble;
pub mod eval;
pub mod loader;
pub mod model;
pub mod preprocess;
pub mod privacy;
pub mod training;

pub use error::{Error, Result};
pub use labels::ActivityLabel;
