//! Monophonic melody generation workbench: MIDI ingestion, transposition
//! datasets, recurrent sequence models trained from scratch, seeded sampling
//! and rhythm-aware tonality metrics.

pub mod dataset;
pub mod generate;
pub mod metrics;
pub mod midi;
pub mod nn;
pub mod train;

pub use dataset::{Corpus, EncodedDataset, Token, TokenKind, TokenVocab, Variant};
pub use generate::{GenerationReport, SamplerConfig};
pub use metrics::{MetricStats, MetricTriple, SpanConfig};
pub use midi::{Melody, NoteEvent, RawNote};
pub use nn::{AdamConfig, CellType, ModelConfig, Scalar};
pub use train::{LearningCurve, TrainConfig, Trainer};

/// Training precision.
pub type ModelParamsF32 = nn::ModelParams<f32>;
/// Gradient-check precision.
pub type ModelParamsF64 = nn::ModelParams<f64>;
pub type ModelStateF32 = nn::ModelState<f32>;
pub type ModelStateF64 = nn::ModelState<f64>;
