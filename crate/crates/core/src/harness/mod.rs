//! Training, evaluation, benchmarking and inspection.
//!
//! Everything the `rsir` binary does is available here as plain functions:
//! [`train`], [`resume`], [`evaluate_checkpoint`], [`bench`] and
//! [`inspect`]. File formats (run config TOML, metrics CSV, checkpoint
//! binary, bench CSV, inspect JSON) are documented on their modules.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod idx;
pub mod inspect;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod train;

pub use bench::{bench, BenchMode, BenchRow};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{DataSpec, Dataset, Normalization, SyntheticTask};
pub use inspect::{inspect, InspectDump};
pub use metrics::{MetricsRow, Split};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::cosine_lr;
pub use train::{evaluate, evaluate_checkpoint, resume, train, EvalReport, RunOutcome};
