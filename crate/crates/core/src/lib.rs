//! Host intrusion detection over system-call traces.
//!
//! The pipeline turns raw syscall traces into binary anomaly verdicts in five
//! steps, each owned by one module:
//!
//! 1. [`ingest`] — parse traces, tokenize call names, window, split.
//! 2. [`nn`] + [`svdd`] — learn a compact feature extractor with a one-class
//!    hypersphere objective over normal windows.
//! 3. [`quant`] — post-training int8 compression of the trained extractor.
//! 4. [`forest`] — isolation-forest novelty scores over feature vectors.
//! 5. [`detect`] — mean + k·sigma threshold calibration, classification, and
//!    detection metrics.
//!
//! [`synth`] generates seeded desk-scale corpora for experiments and tests,
//! and [`artifact`] persists every model/detector artifact in versioned files.
//! Everything is deterministic given a seed: identical inputs and seeds
//! reproduce identical artifacts byte for byte.

pub mod artifact;
pub mod detect;
pub mod forest;
pub mod ingest;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod svdd;
pub mod synth;

pub use detect::{calibrate_threshold, classify, deploy_pipeline, evaluate, Threshold};
pub use forest::IsolationForestModel;
pub use ingest::{DatasetSplit, Label, TokenSequence, Vocabulary};
pub use nn::{ExtractorModel, FeatureVector};
pub use quant::QuantizedModel;
pub use svdd::{SvddState, TrainConfig};
