//! Dataset pipeline: ingestion of the raw files, gap interpolation,
//! normalization, balanced sampling, splits, sample assembly and a
//! schema-compatible synthetic generator.

mod interpolate;
mod normalize;
mod sample;
mod schema;
mod synth;

pub use interpolate::interpolate;
pub use normalize::{FeatureStats, NormStats};
pub use sample::{
    assemble, balanced_sample, split, PreparedDataset, SampleRef, SamplingOutcome, SplitRefs,
};
pub use schema::{
    calendar_features, external_features, ingest, write_bundle, AccidentRecord, FilledSpeedTable,
    IngestedStore, SpeedBucket, SpeedTable, WeatherRow, WeatherTable, NUM_EVENT_CODES,
};
pub use synth::{synth_generate, GenConfig, GenSummary};
