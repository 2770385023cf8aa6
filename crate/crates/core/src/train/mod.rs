//! Run orchestration: config, pretraining and training loops, metric logs,
//! checkpoints and evaluation reports. A run is fully determined by its
//! config; no artifact carries wall-clock data.

mod config;
mod metrics;
mod run;

pub use config::{DataSource, OptimSettings, QraRunSettings, RunConfig, RunData, Stream, TokenSource};
pub use metrics::{fmt_f64, fmt_opt, MetricsLog};
pub use run::{
    evaluate, report_table, run_eval, run_pretrain, run_train, RunOutcome, RunPaths, CHECKPOINT_STEM, CONFIG_FILE,
    EVAL_FILE, METRICS_FILE, REPORT_FILE, TABLE_FILE, TOKENS_FILE,
};

#[cfg(test)]
mod tests;
