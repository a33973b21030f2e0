//! Specification monitors.

use std::sync::Arc;

use rsm_core::model::{Announcement, Envelope, Event, RsmId};
use rsm_core::MachineHost;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MonitorKind {
    Safety,
    Liveness,
}

/// Something that happened during a step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Observation {
    Announce(Announcement),
    /// An event left the program for the environment.
    Env(Envelope),
    Handled { machine: RsmId, event: Event },
    Crash(RsmId),
    DeadLettered { machine: RsmId, event: Event, error: String },
}

pub trait Monitor: Send {
    fn name(&self) -> &str;
    fn kind(&self) -> MonitorKind;
    /// `Err` reports a violation.
    fn observe(&mut self, obs: &Observation, host: &MachineHost) -> Result<(), String>;
    /// A liveness monitor is hot while it waits for something to happen.
    fn is_hot(&self) -> bool {
        false
    }
}

/// Builds a fresh monitor for each iteration.
pub type MonitorFactory = Arc<dyn Fn() -> Box<dyn Monitor> + Send + Sync>;

type ObserveFn<S> = Arc<dyn Fn(&mut S, &Observation, &MachineHost) -> Result<(), String> + Send + Sync>;
type HotFn<S> = Arc<dyn Fn(&S) -> bool + Send + Sync>;

struct FnMonitor<S> {
    name: String,
    kind: MonitorKind,
    state: S,
    observe: ObserveFn<S>,
    hot: Option<HotFn<S>>,
}

impl<S: Send> Monitor for FnMonitor<S> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> MonitorKind {
        self.kind
    }

    fn observe(&mut self, obs: &Observation, host: &MachineHost) -> Result<(), String> {
        (self.observe)(&mut self.state, obs, host)
    }

    fn is_hot(&self) -> bool {
        self.hot.as_ref().map(|h| h(&self.state)).unwrap_or(false)
    }
}

/// A safety monitor from an initial state and a step function.
pub fn safety<S, F>(name: &str, init: S, observe: F) -> MonitorFactory
where
    S: Clone + Send + Sync + 'static,
    F: Fn(&mut S, &Observation, &MachineHost) -> Result<(), String> + Send + Sync + 'static,
{
    let name = name.to_owned();
    let observe: ObserveFn<S> = Arc::new(observe);
    Arc::new(move || {
        Box::new(FnMonitor {
            name: name.clone(),
            kind: MonitorKind::Safety,
            state: init.clone(),
            observe: observe.clone(),
            hot: None,
        })
    })
}

/// A liveness monitor: `hot` tells whether it still waits for progress.
pub fn liveness<S, F, H>(name: &str, init: S, observe: F, hot: H) -> MonitorFactory
where
    S: Clone + Send + Sync + 'static,
    F: Fn(&mut S, &Observation, &MachineHost) -> Result<(), String> + Send + Sync + 'static,
    H: Fn(&S) -> bool + Send + Sync + 'static,
{
    let name = name.to_owned();
    let observe: ObserveFn<S> = Arc::new(observe);
    let hot: HotFn<S> = Arc::new(hot);
    Arc::new(move || {
        Box::new(FnMonitor {
            name: name.clone(),
            kind: MonitorKind::Liveness,
            state: init.clone(),
            observe: observe.clone(),
            hot: Some(hot.clone()),
        })
    })
}
