//! Reproducible runs: a TOML config drives corpus generation, curriculum
//! training, the analysis battery and a hashed report.

mod config;
mod report;
mod run;

pub use config::{AnalysisSpec, DataSpec, ExperimentConfig, ModelSpec, OptimSpec, Seeds, Stage, StageCorpus};
pub use report::{read_report, sha256_file, summarize_sweep, verify_manifest, write_report, ManifestEntry, RunReport, SweepSummary};
pub use run::{
    run_analyze, run_battery, run_train, write_battery, Battery, TrainOptions, TrainSummary, FINAL_CHECKPOINT, REPORT,
    RESOLVED_CONFIG, RESUME_CHECKPOINT, TRAIN_LOG,
};

#[cfg(test)]
mod tests;
