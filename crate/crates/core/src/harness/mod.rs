//! Experiment configuration, prediction tables, the Monte-Carlo benchmark
//! and its reports.

pub mod bench;
pub mod config;
pub mod report;
pub mod table;

pub use bench::{generate_replication, run_benchmark, run_replication, PluginCi, Pools, ReplicationData, ReplicationRow};
pub use config::{DataSource, ExperimentConfig, ReportFormat};
pub use report::{aggregate, emit_report, Aggregate, BenchmarkReport, CSV_HEADER, MSE_CONVENTION};
pub use table::{load_table, read_table, write_table, Table};
