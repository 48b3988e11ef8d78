//! Imbalance-aware test-time adaptation for streaming keyword classification.
//!
//! The engine adapts the normalization affine parameters of a small
//! classifier online, one unlabeled batch at a time, using a decoupled
//! entropy objective, multi-view consistency and two-stage sample selection.
//! Baselines (unadapted, test-time batch norm, Tent) share the same loop.

pub mod adapt;
pub mod augment;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod select;
pub mod stream;

pub use adapt::{adapt_stream, AdaptConfig, AdaptOutcome, AdaptTrace, Ablation, BatchRecord, Method};
pub use augment::{FeatureGrid, MaskPolicy};
pub use error::{Error, Result};
pub use eval::{ConfusionMatrix, EvalReport, F1Scores};
pub use losses::{DemParams, WeightParams};
pub use model::{ModelDims, NormMode, NormPoolClassifier, ParamGrads};
pub use numerics::{LogitVector, ProbVector};
pub use rng::SeedStream;
pub use select::{SelectionOutcome, SelectionThresholds};
pub use stream::{StreamBatch, StreamConfig, UnlabeledBatch};
