//! Optimization loop, warm-up schedule, configuration and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod run;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::Config;
pub use run::{train, train_until, warmup_weight, EpochMetrics, MetricsLog, Trainer};
