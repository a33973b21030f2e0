use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{from_bytes, to_bytes, Codec, CodecError};
use crate::model::{
    entry_prefix, field_key, Announcement, ContextServices, Envelope, Event, FieldKind, HandlerContext, HandlerError,
    MachineClass, Registry, RsmId, VolatileState, FIELDS_MAP, N_CREATE, STATE_FIELD,
};
use crate::network::wire::{FrameKind, Packet, WireFrame};
use crate::storage::log::LogOp;
use crate::storage::{Store, StoreError, Transaction};

use super::config::HostConfig;

pub(crate) const HOSTED_MAP: &str = "hosted";
pub(crate) const SEND_COUNTER_MAP: &str = "send_counter";
pub(crate) const RECEIVE_COUNTER_MAP: &str = "receive_counter";
pub(crate) const META_MAP: &str = "meta";
pub(crate) const INBOXES_MAP: &str = "inboxes";
pub(crate) const OUTBOXES_MAP: &str = "outboxes";
pub const DEADLETTER_QUEUE: &str = "deadletter";

const ID_RESERVED_KEY: &[u8] = b"id_reserved";
const ID_NEXT_KEY: &[u8] = b"id_next";

#[derive(Debug, thiserror::Error)]
pub enum HostError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("no machine {0} on this host")]
    UnknownMachine(RsmId),
    #[error("unknown machine class `{0}`")]
    UnknownClass(String),
    #[error("inconsistent durable state: {0}")]
    Corrupt(String),
}

impl HostError {
    /// True when the host must be restarted from its durable state.
    pub fn is_crash(&self) -> bool {
        matches!(self, HostError::Store(StoreError::Crashed | StoreError::Closed | StoreError::Io(_)))
    }
}

/// Decision of a commit interceptor at a handler's commit point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommitDecision {
    Proceed,
    /// Abort instead of committing and reset the machine's volatile state,
    /// as if the host crashed at the commit point.
    Crash,
}

pub type CommitInterceptor = Box<dyn FnMut(&RsmId, &[LogOp]) -> CommitDecision + Send>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    pub events: Vec<Event>,
    pub announcements: Vec<Announcement>,
    pub sent: Vec<Envelope>,
    pub halted: bool,
    /// Acks released by this commit (non-persistent inbox only).
    pub acks: Vec<WireFrame>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LoopOutcome {
    Idle,
    /// Another task is running this machine's handler.
    Busy,
    Processed(StepReport),
    /// The head event's handler failed; it stays at the head.
    Failed { error: String, attempts: u32 },
    /// The head event failed too often and was moved to the dead-letter
    /// queue.
    DeadLettered { event: Event, error: String },
    CrashInjected,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DrainOutcome {
    Idle,
    /// A batch from this machine is already awaiting acks.
    Busy,
    Sent(Packet),
    /// Events addressed to the environment; already removed from the outbox.
    Env(Vec<Envelope>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AckOutcome {
    Ignored,
    Pending,
    /// Every frame of the batch is acknowledged and its transaction
    /// committed.
    Completed { sender: RsmId, frames: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestOutcome {
    pub acks: Vec<WireFrame>,
    /// Machines that received new inbox events.
    pub woke: Vec<RsmId>,
    pub created: Vec<RsmId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransferOutcome {
    Idle,
    Delivered(RsmId),
    Created(RsmId),
    Env(Envelope),
    /// Destination is halted (or its class unknown); the event was dropped.
    Dropped,
    /// Destination not created yet.
    Blocked(RsmId),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HostStats {
    pub handled: u64,
    pub handler_failures: u64,
    pub dead_letters: u64,
    pub ignored: u64,
    pub injected_crashes: u64,
}

#[derive(Default)]
struct AtomicStats {
    handled: AtomicU64,
    handler_failures: AtomicU64,
    dead_letters: AtomicU64,
    ignored: AtomicU64,
    injected_crashes: AtomicU64,
}

#[derive(Clone, Debug, Default)]
struct Draws {
    ids: VecDeque<RsmId>,
    randoms: VecDeque<u64>,
}

struct RunState {
    volatile: VolatileState,
    failures: u32,
    /// Fresh ids and random draws of an attempt aborted by an injected
    /// crash, replayed by the next attempt.
    replay: Option<Draws>,
    rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, Default)]
struct QueueIdx {
    head: u64,
    tail: u64,
}

#[derive(Clone, Debug)]
struct MemEvent {
    event: Event,
    seq: u64,
}

struct InFlight {
    tx: Transaction,
    packet: Packet,
    acked: Vec<bool>,
    attempts: u32,
}

struct Slot {
    id: RsmId,
    class: Arc<MachineClass>,
    halted: AtomicBool,
    run: Mutex<RunState>,
    inbox: Mutex<QueueIdx>,
    outbox: Mutex<QueueIdx>,
    mem_inbox: Mutex<VecDeque<MemEvent>>,
    ingest_lock: Mutex<()>,
    drain: Mutex<Option<InFlight>>,
}

struct IdAlloc {
    next: u64,
    reserved: u64,
}

/// Runs every machine of one partition over one store.
///
/// The host is sans-IO: callers drive it by invoking
/// [`event_loop_step`](Self::event_loop_step), [`drain_begin`](Self::drain_begin) /
/// [`drain_ack`](Self::drain_ack) and [`ingest`](Self::ingest), and move the
/// resulting packets themselves. Any method may be called concurrently;
/// per-machine handler execution is serialized internally.
pub struct MachineHost {
    config: HostConfig,
    cluster: Vec<String>,
    partition_index: u64,
    store: Store,
    registry: Arc<Registry>,
    machines: RwLock<BTreeMap<RsmId, Arc<Slot>>>,
    ids: Mutex<IdAlloc>,
    placement: AtomicU64,
    interceptor: Mutex<Option<CommitInterceptor>>,
    stats: AtomicStats,
}

impl std::fmt::Debug for MachineHost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MachineHost")
            .field("partition", &self.config.partition)
            .field("machines", &self.machines.read().len())
            .finish()
    }
}

fn pair_key(a: &RsmId, b: &RsmId) -> Vec<u8> {
    let mut k = to_bytes(a);
    b.encode(&mut k);
    k
}

fn idx_key(id: &RsmId, idx: u64) -> Vec<u8> {
    let mut k = to_bytes(id);
    k.extend_from_slice(&idx.to_be_bytes());
    k
}

fn inbox_queue(id: &RsmId) -> String {
    format!("inbox/{id}")
}

fn outbox_queue(id: &RsmId) -> String {
    format!("outbox/{id}")
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "handler panicked".to_owned()
    }
}

fn machine_rng(seed: u64, id: &RsmId) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.partition.bytes().chain(id.counter.to_le_bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

struct Services<'h> {
    host: &'h MachineHost,
    replay: Draws,
    recorded: Draws,
    rng: &'h mut ChaCha8Rng,
    ids_used: bool,
}

impl ContextServices for Services<'_> {
    fn fresh_id(&mut self, placement: Option<&str>) -> Result<RsmId, HandlerError> {
        let id = match self.replay.ids.pop_front() {
            Some(id) => id,
            None => self.host.fresh_id(placement)?,
        };
        self.ids_used = true;
        self.recorded.ids.push_back(id.clone());
        Ok(id)
    }

    fn next_random(&mut self) -> u64 {
        let v = self.replay.randoms.pop_front().unwrap_or_else(|| self.rng.next_u64());
        self.recorded.randoms.push_back(v);
        v
    }
}

enum Attempt {
    Done(LoopOutcome),
    FailedAt(usize, String),
}

impl MachineHost {
    /// Opens the configured store (or a fresh in-memory one) and starts.
    pub fn open(config: HostConfig, registry: Arc<Registry>) -> Result<MachineHost, HostError> {
        let store = match &config.store_path {
            Some(p) => Store::open(p, config.store_config())?,
            None => Store::in_memory_with(config.store_config()),
        };
        MachineHost::start(config, store, registry)
    }

    /// Recovers hosted machines from `store` and resumes them with fresh
    /// volatile state.
    pub fn start(config: HostConfig, store: Store, registry: Arc<Registry>) -> Result<MachineHost, HostError> {
        store.create_queue(DEADLETTER_QUEUE)?;
        let cluster = config.cluster();
        let partition_index = cluster.iter().position(|p| *p == config.partition).unwrap() as u64;
        let host = MachineHost {
            cluster,
            partition_index,
            store: store.clone(),
            registry,
            machines: RwLock::new(BTreeMap::new()),
            ids: Mutex::new(IdAlloc { next: 0, reserved: 0 }),
            placement: AtomicU64::new(0),
            interceptor: Mutex::new(None),
            stats: AtomicStats::default(),
            config,
        };
        let mut slots = BTreeMap::new();
        let mut halted_with_outbox = Vec::new();
        store.with_image(|img| -> Result<(), HostError> {
            let meta = img.map(META_MAP);
            let get_meta = |k: &[u8]| -> Result<u64, HostError> {
                Ok(match meta.and_then(|m| m.get(k)) {
                    Some(v) => from_bytes(v)?,
                    None => 0,
                })
            };
            let reserved = get_meta(ID_RESERVED_KEY)?;
            let next = get_meta(ID_NEXT_KEY)?;
            {
                let mut ids = host.ids.lock();
                ids.next = reserved.max(next);
                ids.reserved = if host.config.transactional_ids { u64::MAX } else { ids.next };
            }
            let scan_idx = |map: &str| -> Result<BTreeMap<RsmId, QueueIdx>, HostError> {
                let mut out: BTreeMap<RsmId, QueueIdx> = BTreeMap::new();
                for k in img.map(map).into_iter().flat_map(|m| m.keys()) {
                    let (idk, idx) = k.split_at(k.len() - 8);
                    let id: RsmId = from_bytes(idk)?;
                    let idx = u64::from_be_bytes(idx.try_into().unwrap());
                    let e = out.entry(id).or_insert(QueueIdx { head: idx, tail: idx });
                    e.head = e.head.min(idx);
                    e.tail = e.tail.max(idx + 1);
                }
                Ok(out)
            };
            let inboxes = scan_idx(INBOXES_MAP)?;
            let outboxes = scan_idx(OUTBOXES_MAP)?;
            for (k, v) in img.map(HOSTED_MAP).into_iter().flatten() {
                let id: RsmId = from_bytes(k)?;
                let (class_name, alive): (String, bool) = from_bytes(v)?;
                let Some(class) = host.registry.get(&class_name).cloned() else {
                    log::warn!("{id}: class `{class_name}` is not registered; not resuming");
                    continue;
                };
                let slot = host.new_slot(id.clone(), class);
                if host.config.shared_queues {
                    if let Some(i) = inboxes.get(&id) {
                        *slot.inbox.lock() = *i;
                    }
                    if let Some(o) = outboxes.get(&id) {
                        *slot.outbox.lock() = *o;
                    }
                }
                if !alive {
                    slot.halted.store(true, Ordering::SeqCst);
                    let has_outbox = if host.config.shared_queues {
                        outboxes.contains_key(&id)
                    } else {
                        img.queue(&outbox_queue(&id)).is_some_and(|q| !q.is_empty())
                    };
                    if !has_outbox {
                        continue;
                    }
                    halted_with_outbox.push(id.clone());
                }
                slots.insert(id, Arc::new(slot));
            }
            Ok(())
        })?;
        log::debug!(
            "{}: resumed {} machines ({} halted with pending outbox)",
            host.config.partition,
            slots.len(),
            halted_with_outbox.len()
        );
        *host.machines.write() = slots;
        Ok(host)
    }

    fn new_slot(&self, id: RsmId, class: Arc<MachineClass>) -> Slot {
        Slot {
            run: Mutex::new(RunState {
                volatile: class.initial_volatile(),
                failures: 0,
                replay: None,
                rng: machine_rng(self.config.seed, &id),
            }),
            id,
            class,
            halted: AtomicBool::new(false),
            inbox: Mutex::new(QueueIdx::default()),
            outbox: Mutex::new(QueueIdx::default()),
            mem_inbox: Mutex::new(VecDeque::new()),
            ingest_lock: Mutex::new(()),
            drain: Mutex::new(None),
        }
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    pub fn partition(&self) -> &str {
        &self.config.partition
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn stats(&self) -> HostStats {
        let s = &self.stats;
        HostStats {
            handled: s.handled.load(Ordering::Relaxed),
            handler_failures: s.handler_failures.load(Ordering::Relaxed),
            dead_letters: s.dead_letters.load(Ordering::Relaxed),
            ignored: s.ignored.load(Ordering::Relaxed),
            injected_crashes: s.injected_crashes.load(Ordering::Relaxed),
        }
    }

    pub fn set_commit_interceptor(&self, interceptor: Option<CommitInterceptor>) {
        *self.interceptor.lock() = interceptor;
    }

    fn slot(&self, id: &RsmId) -> Result<Arc<Slot>, HostError> {
        self.machines
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| HostError::UnknownMachine(id.clone()))
    }

    /// Allocates a fresh machine id placed on `placement` or, without a
    /// hint, on the next partition in round-robin order.
    pub fn fresh_id(&self, placement: Option<&str>) -> Result<RsmId, StoreError> {
        let partition = match placement {
            Some(p) => p.to_owned(),
            None => {
                let i = self.placement.fetch_add(1, Ordering::Relaxed) as usize;
                self.cluster[i % self.cluster.len()].clone()
            }
        };
        let mut a = self.ids.lock();
        if a.next >= a.reserved {
            let reserved = a.next + self.config.id_block;
            let mut tx = self.store.begin()?;
            tx.set(META_MAP, ID_RESERVED_KEY, to_bytes(&reserved))?;
            tx.commit()?;
            a.reserved = reserved;
        }
        let c = a.next;
        a.next += 1;
        Ok(RsmId::new(partition, (self.partition_index << 48) | c))
    }

    // ----- queries -----

    /// Ids of live machines (halted ones excluded).
    pub fn machines(&self) -> Vec<RsmId> {
        self.machines
            .read()
            .values()
            .filter(|s| !s.halted.load(Ordering::SeqCst))
            .map(|s| s.id.clone())
            .collect()
    }

    /// Every id ever instantiated here: (id, class, alive).
    pub fn hosted(&self) -> Vec<(RsmId, String, bool)> {
        self.store.with_image(|img| {
            img.map(HOSTED_MAP)
                .into_iter()
                .flatten()
                .filter_map(|(k, v)| {
                    let id: RsmId = from_bytes(k).ok()?;
                    let (c, alive): (String, bool) = from_bytes(v).ok()?;
                    Some((id, c, alive))
                })
                .collect()
        })
    }

    pub fn is_halted(&self, id: &RsmId) -> bool {
        match self.machines.read().get(id) {
            Some(s) => s.halted.load(Ordering::SeqCst),
            None => self.store.read(HOSTED_MAP, &to_bytes(id)).is_some(),
        }
    }

    pub fn class_of(&self, id: &RsmId) -> Option<String> {
        self.machines.read().get(id).map(|s| s.class.name().to_owned())
    }

    /// Committed state name of a machine.
    pub fn current_state(&self, id: &RsmId) -> Option<String> {
        let slot = self.slot(id).ok()?;
        match self.store.read(FIELDS_MAP, &field_key(id, STATE_FIELD)) {
            Some(v) => from_bytes(&v).ok(),
            None => Some(slot.class.start_state().to_owned()),
        }
    }

    /// Committed value of a persistent register.
    /// `None` for halted or unknown machines.
    pub fn read_field<T: Codec>(&self, id: &RsmId, field: &str) -> Result<Option<T>, HostError> {
        if self.is_halted(id) {
            return Ok(None);
        }
        if let Some(v) = self.store.read(FIELDS_MAP, &field_key(id, field)) {
            return Ok(Some(from_bytes(&v)?));
        }
        match self.machines.read().get(id).map(|s| s.class.persistent_fields().get(field).cloned()) {
            Some(Some(FieldKind::Register(init))) => Ok(Some(from_bytes(&init)?)),
            _ => Ok(None),
        }
    }

    /// Committed entries of a persistent map field.
    pub fn read_entries<K: Codec, V: Codec>(&self, id: &RsmId, field: &str) -> Result<Vec<(K, V)>, HostError> {
        let prefix = entry_prefix(id, field);
        self.store.with_image(|img| {
            img.map(FIELDS_MAP)
                .into_iter()
                .flat_map(|m| m.range(prefix.clone()..).take_while(|(k, _)| k.starts_with(&prefix)))
                .map(|(k, v)| Ok((from_bytes(&k[prefix.len()..])?, from_bytes(v)?)))
                .collect()
        })
    }

    pub fn receive_counter(&self, id: &RsmId, peer: &RsmId) -> u64 {
        self.store
            .read(RECEIVE_COUNTER_MAP, &pair_key(id, peer))
            .and_then(|v| from_bytes(&v).ok())
            .unwrap_or(0)
    }

    pub fn send_counter(&self, id: &RsmId, peer: &RsmId) -> u64 {
        self.store
            .read(SEND_COUNTER_MAP, &pair_key(id, peer))
            .and_then(|v| from_bytes(&v).ok())
            .unwrap_or(0)
    }

    /// All committed (machine, peer) → count entries of one counter table.
    fn counters(&self, map: &str) -> BTreeMap<(RsmId, RsmId), u64> {
        self.store.with_image(|img| {
            img.map(map)
                .into_iter()
                .flatten()
                .filter_map(|(k, v)| Some((from_bytes::<(RsmId, RsmId)>(k).ok()?, from_bytes(v).ok()?)))
                .collect()
        })
    }

    pub fn send_counters(&self) -> BTreeMap<(RsmId, RsmId), u64> {
        self.counters(SEND_COUNTER_MAP)
    }

    pub fn receive_counters(&self) -> BTreeMap<(RsmId, RsmId), u64> {
        self.counters(RECEIVE_COUNTER_MAP)
    }

    /// Dead-lettered events with their machine and diagnostic.
    pub fn dead_letters(&self) -> Vec<(RsmId, Event, String)> {
        self.store.with_image(|img| {
            img.queue(DEADLETTER_QUEUE)
                .into_iter()
                .flatten()
                .filter_map(|b| from_bytes(b).ok())
                .collect()
        })
    }

    pub fn inbox_len(&self, id: &RsmId) -> usize {
        self.slot(id).map(|s| self.inbox_len_of(&s)).unwrap_or(0)
    }

    pub fn outbox_len(&self, id: &RsmId) -> usize {
        self.slot(id).map(|s| self.outbox_len_of(&s)).unwrap_or(0)
    }

    /// Committed inbox contents, oldest first.
    pub fn inbox(&self, id: &RsmId) -> Vec<Event> {
        let Ok(slot) = self.slot(id) else { return Vec::new() };
        if !self.config.persistent_inbox {
            return slot.mem_inbox.lock().iter().map(|m| m.event.clone()).collect();
        }
        self.queue_contents(&slot.id, &slot.inbox, INBOXES_MAP, &inbox_queue(id))
    }

    /// Committed outbox contents, oldest first.
    pub fn outbox(&self, id: &RsmId) -> Vec<Envelope> {
        let Ok(slot) = self.slot(id) else { return Vec::new() };
        self.queue_contents(&slot.id, &slot.outbox, OUTBOXES_MAP, &outbox_queue(id))
    }

    fn queue_contents<T: Codec>(&self, id: &RsmId, idx: &Mutex<QueueIdx>, map: &str, queue: &str) -> Vec<T> {
        let idx = *idx.lock();
        self.store.with_image(|img| {
            if self.config.shared_queues {
                (idx.head..idx.tail)
                    .filter_map(|i| img.map(map)?.get(&idx_key(id, i)).and_then(|b| from_bytes(b).ok()))
                    .collect()
            } else {
                img.queue(queue)
                    .into_iter()
                    .flatten()
                    .filter_map(|b| from_bytes(b).ok())
                    .collect()
            }
        })
    }

    pub fn has_in_flight(&self, id: &RsmId) -> bool {
        self.slot(id).map(|s| s.drain.lock().is_some()).unwrap_or(false)
    }

    /// Machines with inbox events to process.
    pub fn runnable(&self) -> Vec<RsmId> {
        self.machines
            .read()
            .values()
            .filter(|s| !s.halted.load(Ordering::SeqCst) && self.inbox_len_of(s) > 0)
            .map(|s| s.id.clone())
            .collect()
    }

    /// Machines with outbox entries and no batch in flight.
    pub fn drainable(&self) -> Vec<RsmId> {
        self.machines
            .read()
            .values()
            .filter(|s| s.drain.lock().is_none() && self.outbox_len_of(s) > 0)
            .map(|s| s.id.clone())
            .collect()
    }

    /// Machines with a batch awaiting acks.
    pub fn in_flight(&self) -> Vec<RsmId> {
        self.machines
            .read()
            .values()
            .filter(|s| s.drain.lock().is_some())
            .map(|s| s.id.clone())
            .collect()
    }

    fn inbox_len_of(&self, slot: &Slot) -> usize {
        if !self.config.persistent_inbox {
            slot.mem_inbox.lock().len()
        } else if self.config.shared_queues {
            let i = slot.inbox.lock();
            (i.tail - i.head) as usize
        } else {
            self.store.queue_len(&inbox_queue(&slot.id)).unwrap_or(0)
        }
    }

    fn outbox_len_of(&self, slot: &Slot) -> usize {
        if self.config.shared_queues {
            let o = slot.outbox.lock();
            (o.tail - o.head) as usize
        } else {
            self.store.queue_len(&outbox_queue(&slot.id)).unwrap_or(0)
        }
    }

    // ----- queue primitives -----

    /// Appends to a persistent inbox inside `tx`. Caller holds the
    /// destination's ingest lock.
    fn inbox_push(&self, tx: &mut Transaction, slot: &Arc<Slot>, event: &Event) -> Result<(), HostError> {
        if self.config.shared_queues {
            let tail = slot.inbox.lock().tail;
            tx.set(INBOXES_MAP, &idx_key(&slot.id, tail), to_bytes(event))?;
            let s = slot.clone();
            tx.on_commit(move || s.inbox.lock().tail += 1);
        } else {
            tx.enqueue(&inbox_queue(&slot.id), to_bytes(event))?;
        }
        Ok(())
    }

    /// Removes the `k`-th unconsumed inbox event inside `tx` (k counts the
    /// events this transaction already took).
    fn inbox_take(&self, tx: &mut Transaction, slot: &Slot, k: usize) -> Result<MemEvent, HostError> {
        if !self.config.persistent_inbox {
            return slot
                .mem_inbox
                .lock()
                .get(k)
                .cloned()
                .ok_or_else(|| HostError::Corrupt(format!("{}: in-memory inbox shrank", slot.id)));
        }
        let bytes = if self.config.shared_queues {
            let key = idx_key(&slot.id, slot.inbox.lock().head + k as u64);
            let v = tx.get(INBOXES_MAP, &key)?;
            tx.remove(INBOXES_MAP, &key)?;
            v
        } else {
            tx.try_dequeue(&inbox_queue(&slot.id))?
        };
        let bytes = bytes.ok_or_else(|| HostError::Corrupt(format!("{}: inbox entry {k} missing", slot.id)))?;
        Ok(MemEvent {
            event: from_bytes(&bytes)?,
            seq: 0,
        })
    }

    fn outbox_push(&self, tx: &mut Transaction, slot: &Arc<Slot>, entries: &[Envelope]) -> Result<(), HostError> {
        if entries.is_empty() {
            return Ok(());
        }
        if self.config.shared_queues {
            let tail = slot.outbox.lock().tail;
            for (j, e) in entries.iter().enumerate() {
                tx.set(OUTBOXES_MAP, &idx_key(&slot.id, tail + j as u64), to_bytes(e))?;
            }
            let s = slot.clone();
            let n = entries.len() as u64;
            tx.on_commit(move || s.outbox.lock().tail += n);
        } else {
            for e in entries {
                tx.enqueue(&outbox_queue(&slot.id), to_bytes(e))?;
            }
        }
        Ok(())
    }

    /// Reads the `k`-th unconsumed outbox entry without consuming it.
    fn outbox_peek(&self, tx: &mut Transaction, slot: &Slot, k: usize) -> Result<Option<Envelope>, HostError> {
        let bytes = if self.config.shared_queues {
            let o = *slot.outbox.lock();
            if o.head + k as u64 >= o.tail {
                return Ok(None);
            }
            tx.get(OUTBOXES_MAP, &idx_key(&slot.id, o.head + k as u64))?
        } else {
            tx.peek(&outbox_queue(&slot.id))?
        };
        bytes.map(|b| from_bytes(&b)).transpose().map_err(Into::into)
    }

    fn outbox_consume(&self, tx: &mut Transaction, slot: &Slot, k: usize) -> Result<(), HostError> {
        if self.config.shared_queues {
            let head = slot.outbox.lock().head;
            tx.remove(OUTBOXES_MAP, &idx_key(&slot.id, head + k as u64))?;
        } else {
            tx.try_dequeue(&outbox_queue(&slot.id))?;
        }
        Ok(())
    }

    fn advance_outbox_on_commit(&self, tx: &mut Transaction, slot: &Arc<Slot>, n: usize) {
        if self.config.shared_queues && n > 0 {
            let s = slot.clone();
            tx.on_commit(move || s.outbox.lock().head += n as u64);
        }
    }

    // ----- event handling -----

    /// Processes up to `batch_size` inbox events of `id` under one
    /// transaction.
    pub fn event_loop_step(&self, id: &RsmId) -> Result<LoopOutcome, HostError> {
        let slot = self.slot(id)?;
        if slot.halted.load(Ordering::SeqCst) {
            return Ok(LoopOutcome::Idle);
        }
        let Some(mut run) = slot.run.try_lock() else {
            return Ok(LoopOutcome::Busy);
        };
        let available = self.inbox_len_of(&slot);
        if available == 0 {
            return Ok(LoopOutcome::Idle);
        }
        let mut limit = available.min(self.config.batch_size);
        loop {
            match self.attempt(&slot, &mut run, limit)? {
                Attempt::Done(outcome) => return Ok(outcome),
                Attempt::FailedAt(k, _) if k > 0 => limit = k,
                Attempt::FailedAt(_, error) => {
                    self.stats.handler_failures.fetch_add(1, Ordering::Relaxed);
                    run.failures += 1;
                    if run.failures <= self.config.max_redeliveries {
                        log::warn!("{id}: handler failed (attempt {}): {error}", run.failures);
                        return Ok(LoopOutcome::Failed {
                            error,
                            attempts: run.failures,
                        });
                    }
                    let event = self.dead_letter_head(&slot, &error)?;
                    run.failures = 0;
                    run.replay = None;
                    return Ok(LoopOutcome::DeadLettered { event, error });
                }
            }
        }
    }

    fn dead_letter_head(&self, slot: &Arc<Slot>, error: &str) -> Result<Event, HostError> {
        let mut tx = self.store.begin()?;
        let head = self.inbox_take(&mut tx, slot, 0)?;
        if !self.config.persistent_inbox {
            tx.set(
                RECEIVE_COUNTER_MAP,
                &pair_key(&slot.id, &head.event.source),
                to_bytes(&(head.seq + 1)),
            )?;
        }
        tx.enqueue(
            DEADLETTER_QUEUE,
            to_bytes(&(slot.id.clone(), head.event.clone(), error.to_owned())),
        )?;
        let acks = self.consume_on_commit(&mut tx, slot, 1);
        tx.commit()?;
        drop(acks);
        self.stats.dead_letters.fetch_add(1, Ordering::Relaxed);
        log::error!("{}: dead-lettered event type {}: {error}", slot.id, head.event.event_type);
        Ok(head.event)
    }

    /// Registers the inbox-head advance for `n` consumed events; returns
    /// the acks the commit releases (non-persistent inbox).
    fn consume_on_commit(&self, tx: &mut Transaction, slot: &Arc<Slot>, n: usize) -> Vec<WireFrame> {
        if n == 0 {
            return Vec::new();
        }
        let s = slot.clone();
        if !self.config.persistent_inbox {
            let acks = slot
                .mem_inbox
                .lock()
                .iter()
                .take(n)
                .map(|m| WireFrame {
                    kind: FrameKind::Ack,
                    sender: m.event.source.clone(),
                    seq: m.seq,
                    dest: slot.id.clone(),
                    event_type: m.event.event_type,
                    payload: Vec::new(),
                })
                .collect();
            tx.on_commit(move || {
                let mut q = s.mem_inbox.lock();
                for _ in 0..n {
                    q.pop_front();
                }
            });
            acks
        } else {
            if self.config.shared_queues {
                tx.on_commit(move || s.inbox.lock().head += n as u64);
            }
            Vec::new()
        }
    }

    fn attempt(&self, slot: &Arc<Slot>, run: &mut RunState, limit: usize) -> Result<Attempt, HostError> {
        let id = &slot.id;
        let class = slot.class.clone();
        let snapshot = run.volatile.clone();
        let replay = run.replay.clone().unwrap_or_default();
        let mut tx = self.store.begin()?;
        let state_key = field_key(id, STATE_FIELD);
        let mut state: String = match tx.get(FIELDS_MAP, &state_key)? {
            Some(v) => from_bytes(&v)?,
            None => class.start_state().to_owned(),
        };
        let mut report = StepReport::default();
        let RunState { volatile, rng, .. } = run;
        let mut services = Services {
            host: self,
            replay,
            recorded: Draws::default(),
            rng,
            ids_used: false,
        };
        let mut failure = None;
        for k in 0..limit {
            let m = self.inbox_take(&mut tx, slot, k)?;
            if !self.config.persistent_inbox {
                tx.set(RECEIVE_COUNTER_MAP, &pair_key(id, &m.event.source), to_bytes(&(m.seq + 1)))?;
            }
            let event = m.event;
            let Some(handler) = class.handler(&state, event.event_type).cloned() else {
                log::warn!("{id}: no handler for event type {} in state {state}; ignored", event.event_type);
                self.stats.ignored.fetch_add(1, Ordering::Relaxed);
                report.events.push(event);
                continue;
            };
            let mut ctx = HandlerContext::new(
                id,
                &event,
                &class,
                &self.registry,
                state.clone(),
                &mut tx,
                volatile,
                &mut services,
            );
            let result = catch_unwind(AssertUnwindSafe(|| handler(&mut ctx)));
            let effects = ctx.finish();
            match result {
                Ok(Ok(())) => {}
                Ok(Err(e)) if e.is_store_failure() => {
                    return Err(match e {
                        HandlerError::Store(s) => HostError::Store(s),
                        _ => unreachable!(),
                    })
                }
                Ok(Err(e)) => {
                    failure = Some((k, e.to_string()));
                    break;
                }
                Err(p) => {
                    failure = Some((k, panic_message(p)));
                    break;
                }
            }
            report
                .sent
                .extend(effects.output.into_iter().map(|o| o.into_envelope(id)));
            report.announcements.extend(effects.announcements);
            if let Some(next) = effects.jump {
                tx.set(FIELDS_MAP, &state_key, to_bytes(&next))?;
                state = next;
            }
            report.events.push(event);
            if effects.halt {
                report.halted = true;
                break;
            }
        }
        if let Some((k, error)) = failure {
            tx.abort();
            *volatile = snapshot;
            return Ok(Attempt::FailedAt(k, error));
        }
        let ids_used = services.ids_used;
        let recorded = services.recorded;
        self.outbox_push(&mut tx, slot, &report.sent)?;
        let consumed = report.events.len();
        if report.halted {
            self.tombstone(&mut tx, slot, consumed)?;
        }
        if ids_used && self.config.transactional_ids {
            let next = self.ids.lock().next;
            tx.set(META_MAP, ID_NEXT_KEY, to_bytes(&next))?;
        }
        let decision = match self.interceptor.lock().as_mut() {
            Some(i) => i(id, tx.write_set()),
            None => CommitDecision::Proceed,
        };
        if decision == CommitDecision::Crash {
            tx.abort();
            run.volatile = class.initial_volatile();
            run.replay = Some(recorded);
            self.stats.injected_crashes.fetch_add(1, Ordering::Relaxed);
            return Ok(Attempt::Done(LoopOutcome::CrashInjected));
        }
        report.acks = self.consume_on_commit(&mut tx, slot, consumed);
        tx.commit()?;
        run.replay = None;
        run.failures = 0;
        self.stats.handled.fetch_add(consumed as u64, Ordering::Relaxed);
        if report.halted {
            slot.halted.store(true, Ordering::SeqCst);
            slot.mem_inbox.lock().clear();
            let mut i = slot.inbox.lock();
            i.head = i.tail;
        }
        Ok(Attempt::Done(LoopOutcome::Processed(report)))
    }

    /// Marks a machine halted and releases its inbox and persistent fields.
    /// The outbox stays until drained.
    fn tombstone(&self, tx: &mut Transaction, slot: &Arc<Slot>, consumed: usize) -> Result<(), HostError> {
        let id = &slot.id;
        tx.set(HOSTED_MAP, &to_bytes(id), to_bytes(&(slot.class.name().to_owned(), false)))?;
        for (k, _) in tx.scan_prefix(FIELDS_MAP, &to_bytes(id))? {
            tx.remove(FIELDS_MAP, &k)?;
        }
        if self.config.persistent_inbox {
            if self.config.shared_queues {
                let i = *slot.inbox.lock();
                for idx in i.head + consumed as u64..i.tail {
                    tx.remove(INBOXES_MAP, &idx_key(id, idx))?;
                }
            } else {
                tx.drop_queue(&inbox_queue(id))?;
            }
        }
        Ok(())
    }

    // ----- creation -----

    /// Creates the durable record of machine `id` inside `tx`, unless the id
    /// is already known (live or halted). Returns the new slot, to be
    /// registered once `tx` commits.
    fn instantiate_in(&self, tx: &mut Transaction, id: &RsmId, class_name: &str) -> Result<Option<Arc<Slot>>, HostError> {
        let key = to_bytes(id);
        if tx.get(HOSTED_MAP, &key)?.is_some() {
            log::debug!("{id}: duplicate creation request dropped");
            return Ok(None);
        }
        let Some(class) = self.registry.get(class_name).cloned() else {
            log::error!("{id}: creation request for unknown class `{class_name}`");
            let event = Event::new(RsmId::env(), N_CREATE, to_bytes(&class_name));
            tx.enqueue(
                DEADLETTER_QUEUE,
                to_bytes(&(id.clone(), event, format!("unknown class `{class_name}`"))),
            )?;
            tx.set(HOSTED_MAP, &key, to_bytes(&(class_name.to_owned(), false)))?;
            return Ok(None);
        };
        if !self.config.shared_queues {
            self.store.create_queue(&inbox_queue(id))?;
            self.store.create_queue(&outbox_queue(id))?;
        }
        tx.set(HOSTED_MAP, &key, to_bytes(&(class_name.to_owned(), true)))?;
        for (f, kind) in class.persistent_fields() {
            if let FieldKind::Register(init) = kind {
                tx.set(FIELDS_MAP, &field_key(id, f), init.clone())?;
            }
        }
        tx.set(FIELDS_MAP, &field_key(id, STATE_FIELD), to_bytes(&class.start_state().to_owned()))?;
        Ok(Some(Arc::new(self.new_slot(id.clone(), class))))
    }

    fn register_slot(&self, slot: Arc<Slot>) {
        self.machines.write().insert(slot.id.clone(), slot);
    }

    /// Handles a creation record: instantiates the machine if `id` is new.
    /// Returns true if a machine was created.
    pub fn instantiate_on_create(&self, id: &RsmId, class_name: &str) -> Result<bool, HostError> {
        let mut tx = self.store.begin()?;
        let slot = self.instantiate_in(&mut tx, id, class_name)?;
        tx.commit()?;
        let created = slot.is_some();
        if let Some(s) = slot {
            self.register_slot(s);
        }
        Ok(created)
    }

    /// Creates a machine on this partition directly (client-side creation
    /// without going through the network).
    pub fn create_local(&self, class_name: &str) -> Result<RsmId, HostError> {
        if self.registry.get(class_name).is_none() {
            return Err(HostError::UnknownClass(class_name.to_owned()));
        }
        let id = self.fresh_id(Some(&self.config.partition.clone()))?;
        self.instantiate_on_create(&id, class_name)?;
        Ok(id)
    }

    /// Enqueues an event straight into a local machine's inbox, bypassing
    /// sequence numbers. Returns false if the machine is halted.
    pub fn enqueue_local(&self, dest: &RsmId, event: Event) -> Result<bool, HostError> {
        let slot = self.slot(dest)?;
        if slot.halted.load(Ordering::SeqCst) {
            return Ok(false);
        }
        if !self.config.persistent_inbox {
            let seq = self.receive_counter(dest, &event.source)
                + slot.mem_inbox.lock().iter().filter(|m| m.event.source == event.source).count() as u64;
            slot.mem_inbox.lock().push_back(MemEvent { event, seq });
            return Ok(true);
        }
        let _g = slot.ingest_lock.lock();
        let mut tx = self.store.begin()?;
        self.inbox_push(&mut tx, &slot, &event)?;
        tx.commit()?;
        Ok(true)
    }

    // ----- receiving -----

    /// Receiver side of the delivery protocol for a batch of frames.
    pub fn ingest(&self, frames: &[WireFrame]) -> Result<IngestOutcome, HostError> {
        let mut out = IngestOutcome::default();
        for f in frames {
            if f.kind != FrameKind::Msg || f.dest.partition != self.config.partition {
                continue;
            }
            if f.event_type == N_CREATE {
                let class = from_bytes::<String>(&f.payload).unwrap_or_else(|_| "<invalid>".to_owned());
                match self.instantiate_on_create(&f.dest, &class) {
                    Ok(created) => {
                        if created {
                            out.created.push(f.dest.clone());
                        }
                        out.acks.push(f.ack_for());
                    }
                    Err(HostError::Store(StoreError::Conflict(_))) => {}
                    Err(e) => return Err(e),
                }
                continue;
            }
            match self.ingest_message(f) {
                Ok(Ingested::Enqueued) => {
                    out.woke.push(f.dest.clone());
                    out.acks.push(f.ack_for());
                }
                Ok(Ingested::Pending) => out.woke.push(f.dest.clone()),
                Ok(Ingested::Ack) => out.acks.push(f.ack_for()),
                Ok(Ingested::Ignore) | Err(HostError::Store(StoreError::Conflict(_))) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn ingest_message(&self, f: &WireFrame) -> Result<Ingested, HostError> {
        let slot = match self.machines.read().get(&f.dest) {
            Some(s) => s.clone(),
            None => {
                // Halted and fully drained, or not created yet.
                return Ok(if self.store.read(HOSTED_MAP, &to_bytes(&f.dest)).is_some() {
                    Ingested::Ack
                } else {
                    Ingested::Ignore
                });
            }
        };
        if slot.halted.load(Ordering::SeqCst) {
            return Ok(Ingested::Ack);
        }
        let key = pair_key(&f.dest, &f.sender);
        let event = f.to_event();
        if !self.config.persistent_inbox {
            let committed = self.receive_counter(&f.dest, &f.sender);
            if f.seq < committed {
                return Ok(Ingested::Ack);
            }
            let mut q = slot.mem_inbox.lock();
            let pending = q.iter().filter(|m| m.event.source == f.sender).count() as u64;
            if f.seq == committed + pending {
                q.push_back(MemEvent { event, seq: f.seq });
                return Ok(Ingested::Pending);
            }
            return Ok(Ingested::Ignore);
        }
        let _g = slot.ingest_lock.lock();
        let mut tx = self.store.begin()?;
        let c: u64 = match tx.get(RECEIVE_COUNTER_MAP, &key)? {
            Some(v) => from_bytes(&v)?,
            None => 0,
        };
        if f.seq < c {
            return Ok(Ingested::Ack);
        }
        if f.seq > c {
            return Ok(Ingested::Ignore);
        }
        tx.set(RECEIVE_COUNTER_MAP, &key, to_bytes(&(c + 1)))?;
        self.inbox_push(&mut tx, &slot, &event)?;
        tx.commit()?;
        Ok(Ingested::Enqueued)
    }

    // ----- sending -----

    /// Starts draining `id`'s outbox: takes a run of entries for one
    /// destination partition (or for the environment), assigns sequence
    /// numbers and returns the packet to send. The transaction stays open
    /// until every frame is acknowledged.
    pub fn drain_begin(&self, id: &RsmId) -> Result<DrainOutcome, HostError> {
        let slot = self.slot(id)?;
        let mut d = slot.drain.lock();
        if d.is_some() {
            return Ok(DrainOutcome::Busy);
        }
        if self.outbox_len_of(&slot) == 0 {
            return Ok(DrainOutcome::Idle);
        }
        let mut tx = self.store.begin()?;
        let Some(first) = self.outbox_peek(&mut tx, &slot, 0)? else {
            return Ok(DrainOutcome::Idle);
        };
        let same_group = |a: &Envelope, b: &Envelope| a.dest.is_env() == b.dest.is_env() && a.dest.partition == b.dest.partition;
        if !self.config.shared_queues {
            tx.try_dequeue(&outbox_queue(id))?;
        }
        let mut taken = vec![first];
        while taken.len() < self.config.drain_batch {
            let next = if self.config.shared_queues {
                self.outbox_peek(&mut tx, &slot, taken.len())?
            } else {
                tx.peek(&outbox_queue(id))?.map(|b| from_bytes::<Envelope>(&b)).transpose()?
            };
            match next {
                Some(e) if same_group(&e, &taken[0]) => {
                    if !self.config.shared_queues {
                        tx.try_dequeue(&outbox_queue(id))?;
                    }
                    taken.push(e);
                }
                _ => break,
            }
        }
        if self.config.shared_queues {
            for k in 0..taken.len() {
                self.outbox_consume(&mut tx, &slot, k)?;
            }
        }
        self.advance_outbox_on_commit(&mut tx, &slot, taken.len());
        if taken[0].dest.is_env() {
            tx.commit()?;
            return Ok(DrainOutcome::Env(taken));
        }
        let mut frames = Vec::with_capacity(taken.len());
        for e in &taken {
            let seq = if e.event.is_create() {
                0
            } else {
                let key = pair_key(id, &e.dest);
                let c: u64 = match tx.get(SEND_COUNTER_MAP, &key)? {
                    Some(v) => from_bytes(&v)?,
                    None => 0,
                };
                tx.set(SEND_COUNTER_MAP, &key, to_bytes(&(c + 1)))?;
                c
            };
            frames.push(WireFrame::message(id.clone(), seq, e.dest.clone(), &e.event));
        }
        let packet = Packet {
            from: self.config.partition.clone(),
            to: taken[0].dest.partition.clone(),
            frames,
        };
        *d = Some(InFlight {
            tx,
            acked: vec![false; packet.frames.len()],
            packet: packet.clone(),
            attempts: 0,
        });
        Ok(DrainOutcome::Sent(packet))
    }

    /// Applies an ack. When the last frame of a batch is acknowledged the
    /// drain transaction commits.
    pub fn drain_ack(&self, ack: &WireFrame) -> Result<AckOutcome, HostError> {
        let Ok(slot) = self.slot(&ack.sender) else {
            return Ok(AckOutcome::Ignored);
        };
        let mut d = slot.drain.lock();
        let Some(inflight) = d.as_mut() else {
            return Ok(AckOutcome::Ignored);
        };
        let key = ack.transfer_key();
        let Some(i) = inflight
            .packet
            .frames
            .iter()
            .position(|f| f.transfer_key() == key)
        else {
            return Ok(AckOutcome::Ignored);
        };
        inflight.acked[i] = true;
        if !inflight.acked.iter().all(|a| *a) {
            return Ok(AckOutcome::Pending);
        }
        let mut done = d.take().unwrap();
        let frames = done.packet.frames.len();
        done.tx.commit()?;
        Ok(AckOutcome::Completed {
            sender: slot.id.clone(),
            frames,
        })
    }

    /// The unacknowledged frames of `id`'s in-flight batch, counting a new
    /// attempt.
    pub fn drain_retransmit(&self, id: &RsmId) -> Option<(Packet, u32)> {
        let slot = self.slot(id).ok()?;
        let mut d = slot.drain.lock();
        let inflight = d.as_mut()?;
        inflight.attempts += 1;
        let frames = inflight
            .packet
            .frames
            .iter()
            .zip(&inflight.acked)
            .filter(|(_, a)| !**a)
            .map(|(f, _)| f.clone())
            .collect();
        Some((
            Packet {
                from: inflight.packet.from.clone(),
                to: inflight.packet.to.clone(),
                frames,
            },
            inflight.attempts,
        ))
    }

    /// Moves `id`'s oldest outbox entry within this partition in one
    /// transaction (single-partition testing mode: delivery is atomic and
    /// assumed correct).
    pub fn local_transfer_step(&self, id: &RsmId) -> Result<TransferOutcome, HostError> {
        let slot = self.slot(id)?;
        let _d = slot.drain.lock();
        let mut tx = self.store.begin()?;
        let Some(e) = self.outbox_peek(&mut tx, &slot, 0)? else {
            return Ok(TransferOutcome::Idle);
        };
        if e.dest.is_env() {
            self.outbox_consume(&mut tx, &slot, 0)?;
            self.advance_outbox_on_commit(&mut tx, &slot, 1);
            tx.commit()?;
            return Ok(TransferOutcome::Env(e));
        }
        if e.event.is_create() {
            let class = e.event.create_class().unwrap_or_default();
            let new = self.instantiate_in(&mut tx, &e.dest, &class)?;
            self.outbox_consume(&mut tx, &slot, 0)?;
            self.advance_outbox_on_commit(&mut tx, &slot, 1);
            tx.commit()?;
            return Ok(match new {
                Some(s) => {
                    self.register_slot(s);
                    TransferOutcome::Created(e.dest)
                }
                None => TransferOutcome::Dropped,
            });
        }
        let dest = self.machines.read().get(&e.dest).cloned();
        let outcome = match dest {
            Some(d) if !d.halted.load(Ordering::SeqCst) => {
                if !self.config.persistent_inbox {
                    return Err(HostError::Corrupt("local transfer needs a persistent inbox".into()));
                }
                let _g = (!Arc::ptr_eq(&d, &slot)).then(|| d.ingest_lock.lock());
                let _own = Arc::ptr_eq(&d, &slot).then(|| slot.ingest_lock.lock());
                for (map, key) in [
                    (SEND_COUNTER_MAP, pair_key(id, &e.dest)),
                    (RECEIVE_COUNTER_MAP, pair_key(&e.dest, id)),
                ] {
                    let c: u64 = match tx.get(map, &key)? {
                        Some(v) => from_bytes(&v)?,
                        None => 0,
                    };
                    tx.set(map, &key, to_bytes(&(c + 1)))?;
                }
                self.inbox_push(&mut tx, &d, &e.event)?;
                self.outbox_consume(&mut tx, &slot, 0)?;
                self.advance_outbox_on_commit(&mut tx, &slot, 1);
                tx.commit()?;
                return Ok(TransferOutcome::Delivered(e.dest));
            }
            Some(_) => TransferOutcome::Dropped,
            None if tx.get(HOSTED_MAP, &to_bytes(&e.dest))?.is_some() => TransferOutcome::Dropped,
            None => return Ok(TransferOutcome::Blocked(e.dest)),
        };
        self.outbox_consume(&mut tx, &slot, 0)?;
        self.advance_outbox_on_commit(&mut tx, &slot, 1);
        tx.commit()?;
        Ok(outcome)
    }
}

enum Ingested {
    Enqueued,
    Pending,
    Ack,
    Ignore,
}
