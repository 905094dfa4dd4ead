//! Experiment orchestration: evaluation, grids, ablations, sweeps, reports.

mod config;
mod eval;
mod experiments;
mod pipeline;

pub use config::{CartpoleSettings, ClinicalSettings, ExperimentConfig, Method, Task};
pub use eval::{action_matching, mean_se, roc_pr_areas, rollout_returns, scale_return, ActionMatching, Controller, MeanSe};
pub use experiments::{
    ablation_cells, matrix_cells, noise_cells, references, report, run_cells, run_seeds, summary_csv, tidy_csv,
    train_vs_test_csv, Cell, CellRecord, Experiment, Progress, ReportFiles,
};
pub use pipeline::{
    cached_references, evaluate, measure_references, online_return, train_method, Fixture, References, Scores, Trained,
    TestTarget,
};
