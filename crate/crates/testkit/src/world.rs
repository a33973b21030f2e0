//! One program under test: a host plus external inputs.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsm_core::codec::{from_bytes, Codec};
use rsm_core::model::{Envelope, Event, Registry, RsmId};
use rsm_core::runtime::{CommitDecision, HostError, LoopOutcome, TransferOutcome};
use rsm_core::storage::log::LogOp;
use rsm_core::storage::{FsyncPolicy, Store, StoreConfig};
use rsm_core::{HostConfig, MachineHost};

use crate::monitor::Observation;
use crate::TestError;

/// Partition of every machine in a test world.
pub const PARTITION: &str = "test";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskId {
    /// Run the handler for the head of this machine's inbox.
    Handle(RsmId),
    /// Move the oldest entry of this machine's outbox.
    Transfer(RsmId),
    /// Deliver the next event of an external feed.
    External(usize),
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskId::Handle(id) => write!(f, "handle {id}"),
            TaskId::Transfer(id) => write!(f, "transfer {id}"),
            TaskId::External(i) => write!(f, "feed {i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CrashPolicy {
    Never,
    /// Crash a commit with this probability. A retry after a crash always
    /// commits.
    Random(f64),
    EveryCommit,
}

struct Feed {
    dest: RsmId,
    events: VecDeque<Event>,
}

struct CrashState {
    policy: CrashPolicy,
    rng: ChaCha8Rng,
    force: Option<RsmId>,
    /// Write sets of aborted attempts, awaiting their retries.
    pending: BTreeMap<RsmId, Vec<LogOp>>,
    mismatches: Vec<String>,
}

impl CrashState {
    fn decide(&mut self, id: &RsmId, ops: &[LogOp]) -> CommitDecision {
        let ops: Vec<LogOp> = ops.iter().filter(|o| o.collection != "meta").cloned().collect();
        if let Some(before) = self.pending.remove(id) {
            if before != ops {
                self.mismatches.push(describe_mismatch(id, &before, &ops));
            }
            return CommitDecision::Proceed;
        }
        let crash = match self.policy {
            _ if self.force.as_ref() == Some(id) => {
                self.force = None;
                true
            }
            CrashPolicy::Never => false,
            CrashPolicy::EveryCommit => true,
            CrashPolicy::Random(p) => self.rng.gen_bool(p.clamp(0.0, 1.0)),
        };
        if crash {
            self.pending.insert(id.clone(), ops);
            CommitDecision::Crash
        } else {
            CommitDecision::Proceed
        }
    }
}

fn field_name(id: &RsmId, key: &[u8]) -> Option<String> {
    let prefix = rsm_core::to_bytes(id);
    let mut rest = key.strip_prefix(prefix.as_slice())?;
    String::decode(&mut rest).ok()
}

fn show(bytes: &[u8]) -> String {
    match from_bytes::<i64>(bytes) {
        Ok(v) if bytes.len() == 8 => v.to_string(),
        _ => format!("{bytes:02x?}"),
    }
}

fn describe_mismatch(id: &RsmId, before: &[LogOp], after: &[LogOp]) -> String {
    let at = before.iter().zip(after).position(|(a, b)| a != b).unwrap_or(before.len().min(after.len()));
    let what = match (before.get(at), after.get(at)) {
        (Some(a), Some(b)) if a.collection == "fields" && a.key == b.key => {
            let f = field_name(id, &a.key).unwrap_or_else(|| "?".into());
            format!(
                "persistent field `{f}` was written as {} before the crash and {} after it",
                show(&a.value),
                show(&b.value)
            )
        }
        (Some(a), Some(b)) if a.collection == "fields" || b.collection == "fields" => {
            let fa = field_name(id, &a.key).unwrap_or_else(|| a.collection.clone());
            let fb = field_name(id, &b.key).unwrap_or_else(|| b.collection.clone());
            format!("the write to `{fa}` before the crash became a write to `{fb}` after it")
        }
        (Some(a), Some(_)) => format!("write {at} to `{}` differs after the crash", a.collection),
        _ => format!(
            "the crashed attempt wrote {} entries and the retry {}",
            before.len(),
            after.len()
        ),
    };
    format!(
        "non-interference violation in {id}: {what}; persistent effects must not depend on volatile \
         state, and nondeterminism must come from ctx.random_*"
    )
}

/// A single-partition world driven one task at a time.
pub struct World {
    host: MachineHost,
    feeds: Vec<Feed>,
    env_out: Vec<Envelope>,
    crash: Arc<Mutex<CrashState>>,
}

impl World {
    pub fn new(registry: Arc<Registry>, seed: u64, crashes: CrashPolicy) -> Result<World, TestError> {
        let config = HostConfig {
            partition: PARTITION.into(),
            batch_size: 1,
            shared_queues: true,
            persistent_inbox: true,
            fsync: FsyncPolicy::Never,
            seed,
            lock_timeout: Duration::ZERO,
            ..HostConfig::default()
        };
        let store = Store::in_memory_with(StoreConfig {
            fsync: FsyncPolicy::Never,
            compaction_threshold: config.compaction_threshold,
            lock_timeout: Duration::ZERO,
        });
        let host = MachineHost::start(config, store, registry)?;
        let crash = Arc::new(Mutex::new(CrashState {
            policy: crashes,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c4a5),
            force: None,
            pending: BTreeMap::new(),
            mismatches: Vec::new(),
        }));
        let c = crash.clone();
        host.set_commit_interceptor(Some(Box::new(move |id, ops| c.lock().unwrap().decide(id, ops))));
        Ok(World {
            host,
            feeds: Vec::new(),
            env_out: Vec::new(),
            crash,
        })
    }

    pub fn host(&self) -> &MachineHost {
        &self.host
    }

    pub fn create(&mut self, class: &str) -> Result<RsmId, TestError> {
        Ok(self.host.create_local(class)?)
    }

    /// Puts an event from the environment into `dest`'s inbox now.
    pub fn send(&mut self, dest: &RsmId, event_type: u32, payload: Vec<u8>) -> Result<(), TestError> {
        if !self.host.enqueue_local(dest, Event::new(RsmId::env(), event_type, payload))? {
            return Err(TestError::Setup(format!("{dest} is halted")));
        }
        Ok(())
    }

    /// Queues events from the environment that the scheduler delivers one
    /// at a time, interleaved with the program.
    pub fn feed(&mut self, dest: &RsmId, events: impl IntoIterator<Item = (u32, Vec<u8>)>) {
        self.feeds.push(Feed {
            dest: dest.clone(),
            events: events.into_iter().map(|(t, p)| Event::new(RsmId::env(), t, p)).collect(),
        });
    }

    /// `count` payload-less events of one type, e.g. timer ticks.
    pub fn ticker(&mut self, dest: &RsmId, event_type: u32, count: usize) {
        self.feed(dest, (0..count).map(|_| (event_type, Vec::new())));
    }

    /// Events the program sent to the environment, in order.
    pub fn env_outputs(&self) -> &[Envelope] {
        &self.env_out
    }

    /// Enabled tasks, sorted.
    pub fn tasks(&self) -> Vec<TaskId> {
        let mut v: Vec<TaskId> = self.host.runnable().into_iter().map(TaskId::Handle).collect();
        v.extend(self.host.drainable().into_iter().map(TaskId::Transfer));
        v.extend(
            self.feeds
                .iter()
                .enumerate()
                .filter(|(_, f)| !f.events.is_empty())
                .map(|(i, _)| TaskId::External(i)),
        );
        v.sort();
        v
    }

    pub fn run_task(&mut self, task: &TaskId) -> Result<Vec<Observation>, TestError> {
        let mut obs = Vec::new();
        match task {
            TaskId::Handle(id) => match self.host.event_loop_step(id)? {
                LoopOutcome::Processed(report) => {
                    obs.extend(report.events.into_iter().map(|event| Observation::Handled {
                        machine: id.clone(),
                        event,
                    }));
                    obs.extend(report.announcements.into_iter().map(Observation::Announce));
                }
                LoopOutcome::CrashInjected => obs.push(Observation::Crash(id.clone())),
                LoopOutcome::DeadLettered { event, error } => obs.push(Observation::DeadLettered {
                    machine: id.clone(),
                    event,
                    error,
                }),
                LoopOutcome::Idle | LoopOutcome::Busy | LoopOutcome::Failed { .. } => {}
            },
            TaskId::Transfer(id) => {
                if let TransferOutcome::Env(e) = self.host.local_transfer_step(id)? {
                    self.env_out.push(e.clone());
                    obs.push(Observation::Env(e));
                }
            }
            TaskId::External(i) => {
                let feed = &mut self.feeds[*i];
                if let Some(e) = feed.events.pop_front() {
                    match self.host.enqueue_local(&feed.dest, e) {
                        Ok(_) | Err(HostError::UnknownMachine(_)) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
        Ok(obs)
    }

    /// Non-interference violations found by crash retries so far.
    pub fn take_mismatches(&mut self) -> Vec<String> {
        std::mem::take(&mut self.crash.lock().unwrap().mismatches)
    }

    /// Crashes `id`'s next commit, retries it, and compares the two write
    /// sets. `Ok(false)` if `id` had nothing to run.
    pub fn inject_commit_crash(&mut self, id: &RsmId) -> Result<Result<bool, String>, TestError> {
        if !self.host.runnable().contains(id) {
            return Ok(Ok(false));
        }
        self.crash.lock().unwrap().force = Some(id.clone());
        let first = self.host.event_loop_step(id)?;
        if first != LoopOutcome::CrashInjected {
            self.crash.lock().unwrap().force = None;
            return Ok(Ok(true));
        }
        self.host.event_loop_step(id)?;
        match self.take_mismatches().pop() {
            Some(m) => Ok(Err(m)),
            None => Ok(Ok(true)),
        }
    }
}
