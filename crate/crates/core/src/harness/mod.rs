//! Datasets, experiments and report files.

pub mod data;
pub mod experiments;
pub mod idx;
pub mod report;

pub use data::{gen_synthetic, Dataset, Provenance, Split, SyntheticKind, SyntheticSpec};
pub use experiments::{
    calibrate_epsilons, default_defenses, experiment_calotte, experiment_matrix, experiment_norm_stats, median_of,
    CalotteReport, CalotteRow, ExperimentConfig, ModelZoo, NormStatsReport, RobustnessMatrix,
};
pub use idx::load_idx;
pub use report::{config_digest, read_json_report, write_report, Report, ReportFormat};
