//! Evaluation, reporting and the command-line driver.

pub mod cli;
pub mod config;
mod eval;
pub mod metrics;
pub mod report;

pub use cli::{cli, execute, Invocation, RunArgs, RunManifest};
pub use config::{RunConfig, RUN_CONFIG_SCHEMA};
pub use eval::{evaluate, evaluate_with, model_predictor, EvalOptions, MetricEntry, MetricsReport, ReportMetadata, METRICS_CSV_HEADER};
pub use metrics::{acc_frame, bias_map, lat_weighted_acc, lat_weighted_rmse, render_ppm, rmse_frame, symmetric_limit, write_bias_maps};
pub use report::{RunReport, RunSummary};
