//! Configuration, experiment orchestration, result files and
//! benchmarking behind the `kfrflow` command-line tool.

pub mod bench;
pub mod config;
pub mod experiment;
pub mod output;
pub mod sweep;

pub use bench::{bench_step, BenchResult};
pub use config::{parse_config, BenchConfig, ConfigFile, RunConfig, RunSection, SamplerKind, SweepGrid};
pub use experiment::{run_experiment, RunRecord, WORKERS_ENV};
pub use output::{write_record, SCHEMA_VERSION};
pub use sweep::{sweep, SweepResult};
