//! Staged, resumable synthesis pipeline.
//!
//! Each stage writes one directory under the work directory and records its
//! config hash, input hashes and output hash in `manifest.json`. A stage
//! refuses to run when an upstream directory is missing or was modified after
//! it was recorded, and is skipped when nothing it depends on changed.

pub mod config;
pub mod manifest;
pub mod stages;

pub use config::{apply_override, DataSource, PipelineConfig, PRESETS};
pub use manifest::{hash_dir, Manifest, StageRecord};
pub use stages::{synthesize_dataset, LabelRecord, Pipeline, Stage, StageOutcome, SynthesisReport};
