//! On-disk formats and the synthetic benchmark generator.

pub mod manifest;
pub mod store;
pub mod synthetic;
pub mod tables;

pub use manifest::{split_regime, ClassCounts, ClassSplit, DatasetManifest, Regime, ToyEncoderSpec, DEFAULT_PROMPT_TEMPLATE};
pub use store::{FeatureStore, MaskedEntry, UNLABELED};
pub use synthetic::{gen_synthetic, labeled_from_store, toy_encoder, DomainShift, SyntheticBenchmark, SyntheticConfig};
pub use tables::{
    predictions_from_csv, predictions_to_csv, read_predictions, with_comment, write_predictions, GroundTruth, PredictionRow,
};
