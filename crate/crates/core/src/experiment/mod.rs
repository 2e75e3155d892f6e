//! End-to-end orchestration from a config file: run directories, reports
//! and cross-run comparison.

mod compare;
mod config;
mod pipeline;
mod report;
mod run;

pub use compare::{compare, CompareRow, CompareTable, COLUMNS};
pub use config::{
    DataConfig, ExperimentConfig, Overlap, PolicyConfig, PretrainConfig, RewardConfig, SftExtendedConfig, Stage,
};
pub use pipeline::{DataSplit, Pipeline};
pub use report::{render_svg, report, Curve, ReportFiles};
pub use run::{read_manifest, run, stage_logs, FailureManifest, Manifest, RunSummary, CONFIG_FILE, FAILURE_FILE, MANIFEST_FILE};
