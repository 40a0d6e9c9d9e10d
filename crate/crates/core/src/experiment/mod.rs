//! Structured experiment configuration, the on-disk workspace, the suite
//! presets and the artifact verifier used by the command-line driver.

mod config;
mod suite;
mod verify;
mod workspace;

pub use config::{
    DataSection, ExperimentConfig, JsonlDataset, ModelSection, PretrainSection, SamplerSection, SourceSection,
    SuiteSection, TargetSection, SCHEMA_VERSION,
};
pub use suite::{Arm, Lab, OrderSummary, PairedDelta, Preset, SuiteName, SuiteRow, SuiteSummary};
pub use verify::{verify_artifacts, VerifyOutcome};
pub use workspace::{
    build_base, build_raw_corpora, ensure_dir, load_base, task_specs, write_text, Layout, Workspace, REPORT_FILE,
    SNAPSHOT_FILE, VOCAB_FILE,
};
