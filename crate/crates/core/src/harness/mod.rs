//! Experiment plumbing: run configuration, the training loop, evaluation,
//! metrics files, checkpoints and plots.
//!
//! A run writes `metrics.csv` and `checkpoint.tdv3` into its output
//! directory. Everything is seeded from `schedule.seed`, so the same
//! configuration reproduces the same metrics file byte for byte (as long as
//! `schedule.record_wall_clock` stays off).

mod checkpoint;
mod config;
mod metrics;
mod plot;
mod selftest;
mod train;


pub use checkpoint::{Checkpoint, Record, MAGIC, VERSION};
pub use config::{OptimConfig, ReplayConfig, RunConfig, ScheduleConfig};
pub use metrics::{fmt_g9, parse_metrics, read_metrics, MetricsRow, MetricsTable, MetricsWriter, HEADER};
pub use plot::{emit_plots, render_svg, series_label, Series};
pub use selftest::{selftest, SelfCheck};
pub use train::{
    apply_seed_override, evaluate, evaluate_store, run_train, run_train_with, EvalResult, Models, Real, TrainSummary,
    CHECKPOINT_FILE, METRICS_FILE,
};
