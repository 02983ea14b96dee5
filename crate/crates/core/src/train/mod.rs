//! Optimization, metrics, and the experiment runner.

pub mod metrics;
mod optim;
mod runner;
mod schedule;

pub use optim::AdamW;
pub use runner::{
    evaluate_loss, evaluate_metrics, fit, predict, run_cell, run_experiment, stack_targets, summarize, task_loss,
    write_results_csv, Cell, CellFailure, Experiment, RunResult, Stat, Summary, TrainConfig, TrainLog,
};
pub use schedule::OneCycle;
