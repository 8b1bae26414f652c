//! Experiment driver: configuration, data, training and the oracle studies.

pub mod config;
pub mod data;
pub mod optim;
pub mod studies;
pub mod train;

use std::path::Path;

use serde::Serialize;

use crate::error::Result;

pub use config::{parse_config, parse_config_str, ExperimentConfig, Parsed};
pub use data::{gen_synthetic, Dataset, SyntheticData};
pub use studies::{run_biasvar, run_ode_check, run_order_study, BiasVarRow, OdeRow, OrderRow};
pub use train::{run_train, MetricsRow, Replica, ReplicaOutcome, TrainReport};

/// A CSV row type and its exact header.
pub trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

impl CsvRow for MetricsRow {
    const HEADER: &'static [&'static str] = &[
        "step",
        "seed",
        "estimator",
        "train_loss",
        "eval_loss",
        "lb_loss",
        "step_time_ms",
        "max_expert_load_fraction",
    ];
}

impl CsvRow for BiasVarRow {
    const HEADER: &'static [&'static str] =
        &["estimator", "bias_l2", "rel_bias", "variance_trace", "n_samples"];
}

impl CsvRow for OrderRow {
    const HEADER: &'static [&'static str] = &["estimator", "epsilon", "bias_l2", "ratio"];
}

impl CsvRow for OdeRow {
    const HEADER: &'static [&'static str] = &["method", "function", "h", "error", "ratio"];
}

/// Writes the header and then every row. The header is written even when
/// there are no rows.
pub fn write_csv<T: CsvRow>(out: impl std::io::Write, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(T::HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<T: CsvRow>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(std::io::BufWriter::new(file), rows)
}
