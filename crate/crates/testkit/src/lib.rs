//! Systematic testing of machine programs on a single in-memory host.
//!
//! A [`World`] runs one program; a [`Scheduler`] picks which task runs
//! next (a handler step, an outbox transfer or an external input); monitors
//! watch the resulting observations. [`explore`] repeats this for many
//! seeded iterations, optionally crashing machines at their commit points
//! and checking that each retry writes exactly what the aborted attempt
//! would have written.

pub mod explore;
pub mod mock;
pub mod monitor;
pub mod scheduler;
pub mod world;

pub use explore::{explore, replay, ExploreConfig, IterationResult, Report, TestProgram, ViolationReport};
pub use monitor::{liveness, safety, Monitor, MonitorFactory, MonitorKind, Observation};
pub use scheduler::{Scheduler, Strategy};
pub use world::{CrashPolicy, TaskId, World};

use rsm_core::runtime::HostError;

#[derive(Debug, thiserror::Error)]
pub enum TestError {
    #[error("host: {0}")]
    Host(#[from] HostError),
    #[error("setup: {0}")]
    Setup(String),
}
