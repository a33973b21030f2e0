//! The machine execution engine: one [`MachineHost`] per partition.

mod config;
mod host;

pub use config::{ConfigError, HostConfig};
pub use host::{
    AckOutcome, CommitDecision, CommitInterceptor, DrainOutcome, HostError, HostStats, IngestOutcome, LoopOutcome,
    MachineHost, StepReport, TransferOutcome, DEADLETTER_QUEUE,
};
