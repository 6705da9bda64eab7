//! Synthetic data, experiment configuration, run orchestration and export.

mod config;
mod data;
mod export;
mod run;

pub use config::{splitmix64, ExperimentConfig, RelearnParams, Scenario, SeedPlan, SuccessiveParams, OUT_DIR_ENV};
pub use data::{gen_synthetic, DatasetBundle, MotifTable, TaskParams};
pub use export::{export_plotdata, metrics_from_rows, read_plotdata, write_plotdata, PlotRow};
pub use run::{
    apply_method, attack, build_mask, generate_data, prepare, relearn_set, replay_phase, run_experiment,
    run_experiment_with, train_original, PhaseError, PhaseRecord, Prepared, RelearnRecord, RunRecord, Timing,
    CONFIG_FILE, METRICS_FILE, RECORD_FILE, SOURCE_VERSION, THETA_STAR_FILE, TRAJECTORY_FILE,
};

/// Formats a float with 17 significant digits; parses back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
