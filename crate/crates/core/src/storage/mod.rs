//! Local durable store with all-or-nothing transactions over reliable queues
//! and reliable maps.
//!
//! A [`Store`] keeps its committed state in memory and, for the file backend,
//! appends one checksummed record per committed transaction to a write-ahead
//! log. Recovery replays the log; a torn record at the tail is discarded.
//!
//! Concurrency control is lock based: dequeuing (or peeking) a queue takes
//! that queue's head lock, and every map read or write takes the key's lock.
//! Locks are held until commit or abort. Enqueues take no lock; they are
//! appended when the transaction commits. A transaction that finds a lock
//! held blocks for at most [`StoreConfig::lock_timeout`] and then fails with
//! [`StoreError::Conflict`].

mod image;
pub mod log;

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

pub use self::image::StoreImage;
use self::log::{dissect, LogOp, LogRecord, OpCode};

const WAL_FILE: &str = "wal.log";
const SNAPSHOT_FILE: &str = "snapshot.bin";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store is closed")]
    Closed,
    #[error("store crashed; reopen it to recover")]
    Crashed,
    #[error("transaction {0} is no longer open")]
    NotOpen(u64),
    #[error("lock conflict on {0}")]
    Conflict(String),
    #[error("unknown queue `{0}`")]
    UnknownQueue(String),
    #[error("corrupt log at offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// When commit records are forced to stable storage. Affects durability
/// only; a commit is atomic under every policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsyncPolicy {
    Always,
    /// fsync after every n commits.
    Batched(u32),
    Never,
}

impl std::str::FromStr for FsyncPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "always" => Ok(FsyncPolicy::Always),
            "never" => Ok(FsyncPolicy::Never),
            other => match other.strip_prefix("batched") {
                Some("") => Ok(FsyncPolicy::Batched(32)),
                Some(n) => n
                    .trim_start_matches(':')
                    .parse()
                    .map(FsyncPolicy::Batched)
                    .map_err(|e| format!("bad fsync batch `{n}`: {e}")),
                None => Err(format!("unknown fsync policy `{other}`")),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct StoreConfig {
    pub fsync: FsyncPolicy,
    /// Log size that triggers snapshot + truncate.
    pub compaction_threshold: u64,
    pub lock_timeout: Duration,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            fsync: FsyncPolicy::Always,
            compaction_threshold: 64 << 20,
            lock_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StoreStats {
    /// Non-empty transactions committed.
    pub commits: u64,
    pub ops: u64,
    pub log_bytes: u64,
    pub fsyncs: u64,
    pub compactions: u64,
}

/// What recovery found in the log.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub records_applied: usize,
    pub last_tx_id: u64,
    pub valid_len: u64,
    pub discarded_tail_bytes: u64,
}

/// Decides, per non-empty commit attempt, whether the store crashes instead
/// of committing. Used for fault injection.
pub type CommitFault = Box<dyn FnMut() -> bool + Send>;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum LockKey {
    QueueHead(String),
    MapKey(String, Vec<u8>),
}

impl std::fmt::Display for LockKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LockKey::QueueHead(q) => write!(f, "head of queue `{q}`"),
            LockKey::MapKey(m, k) => write!(f, "key {k:02x?} of map `{m}`"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Open,
    Closed,
    Crashed,
}

struct LogFile {
    dir: PathBuf,
    wal: File,
    len: u64,
    unsynced: u32,
}

struct Shared {
    image: StoreImage,
    locks: HashMap<LockKey, u64>,
    log: Option<LogFile>,
    status: Status,
    stats: StoreStats,
    last_tx: u64,
    fault: Option<CommitFault>,
}

struct Inner {
    shared: Mutex<Shared>,
    released: Condvar,
    config: StoreConfig,
    next_tx: AtomicU64,
}

/// Handle to a store. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.inner.shared.lock();
        f.debug_struct("Store")
            .field("dir", &s.log.as_ref().map(|l| l.dir.clone()))
            .field("status", &s.status)
            .field("stats", &s.stats)
            .finish()
    }
}

impl Store {
    /// A store without a log: committed state lives only in memory.
    pub fn in_memory() -> Store {
        Store::in_memory_with(StoreConfig::default())
    }

    pub fn in_memory_with(config: StoreConfig) -> Store {
        Store::from_parts(StoreImage::default(), None, config, 0)
    }

    fn from_parts(image: StoreImage, log: Option<LogFile>, config: StoreConfig, last_tx: u64) -> Store {
        Store {
            inner: Arc::new(Inner {
                shared: Mutex::new(Shared {
                    image,
                    locks: HashMap::new(),
                    log,
                    status: Status::Open,
                    stats: StoreStats::default(),
                    last_tx,
                    fault: None,
                }),
                released: Condvar::new(),
                config,
                next_tx: AtomicU64::new(last_tx + 1),
            }),
        }
    }

    /// Opens (creating if needed) a log-backed store in `dir`, replaying
    /// the snapshot and log. A torn record at the end of the log is cut off.
    pub fn open(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Store> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let snapshot = match fs::read(dir.join(SNAPSHOT_FILE)) {
            Ok(b) => Some(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let wal_path = dir.join(WAL_FILE);
        let mut wal = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .append(true)
            .open(&wal_path)?;
        let mut bytes = Vec::new();
        wal.read_to_end(&mut bytes)?;
        let (image, report) = Store::recover_from_bytes(snapshot.as_deref(), &bytes)?;
        if report.discarded_tail_bytes > 0 {
            ::log::warn!(
                "discarding {} torn bytes at the end of {}",
                report.discarded_tail_bytes,
                wal_path.display()
            );
            wal.set_len(report.valid_len)?;
            wal.sync_all()?;
        }
        let log = LogFile {
            dir: dir.to_owned(),
            wal,
            len: report.valid_len,
            unsynced: 0,
        };
        Ok(Store::from_parts(image, Some(log), config, report.last_tx_id))
    }

    /// Rebuilds committed state from raw snapshot and log bytes.
    ///
    /// Records whose tx id is not above the snapshot's are skipped. A bad
    /// record that extends to the end of `wal` is a torn append and is
    /// ignored; a bad record followed by more bytes is reported as
    /// corruption.
    pub fn recover_from_bytes(snapshot: Option<&[u8]>, wal: &[u8]) -> Result<(StoreImage, RecoveryReport)> {
        let mut image = StoreImage::default();
        let mut report = RecoveryReport::default();
        if let Some(snap) = snapshot {
            let d = dissect(snap);
            match (d.records.as_slice(), d.defect) {
                ([only], None) => {
                    image.apply_record(&only.record).map_err(|reason| StoreError::Corrupt {
                        offset: 0,
                        reason: format!("snapshot: {reason}"),
                    })?;
                    report.last_tx_id = only.record.tx_id;
                }
                (_, defect) => {
                    return Err(StoreError::Corrupt {
                        offset: 0,
                        reason: format!("snapshot unreadable: {defect:?}"),
                    })
                }
            }
        }
        let d = dissect(wal);
        for span in &d.records {
            if span.record.tx_id <= report.last_tx_id {
                continue;
            }
            image.apply_record(&span.record).map_err(|reason| StoreError::Corrupt {
                offset: span.offset as u64,
                reason,
            })?;
            report.records_applied += 1;
            report.last_tx_id = span.record.tx_id;
        }
        report.valid_len = d.valid_len() as u64;
        if let Some(defect) = d.defect {
            if !defect.at_tail {
                return Err(StoreError::Corrupt {
                    offset: defect.offset as u64,
                    reason: defect.defect.to_string(),
                });
            }
            report.discarded_tail_bytes = (wal.len() - defect.offset) as u64;
        }
        Ok((image, report))
    }

    /// Simulates a process crash: the store stops accepting work. Committed
    /// state survives and is recovered by [`Store::reopen`].
    pub fn crash(&self) {
        let mut s = self.inner.shared.lock();
        s.status = Status::Crashed;
        s.locks.clear();
        drop(s);
        self.inner.released.notify_all();
    }

    pub fn close(&self) {
        let mut s = self.inner.shared.lock();
        if s.status == Status::Open {
            s.status = Status::Closed;
        }
        if let Some(log) = s.log.as_mut() {
            let _ = log.wal.sync_all();
        }
        drop(s);
        self.inner.released.notify_all();
    }

    pub fn is_crashed(&self) -> bool {
        self.inner.shared.lock().status == Status::Crashed
    }

    /// Recovers a fresh store from this store's durable state: the log for
    /// file-backed stores, the committed image for in-memory ones.
    pub fn reopen(&self) -> Result<Store> {
        let s = self.inner.shared.lock();
        match &s.log {
            Some(log) => {
                let dir = log.dir.clone();
                drop(s);
                Store::open(dir, self.inner.config.clone())
            }
            None => Ok(Store::from_parts(s.image.clone(), None, self.inner.config.clone(), s.last_tx)),
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.inner.config
    }

    pub fn dir(&self) -> Option<PathBuf> {
        self.inner.shared.lock().log.as_ref().map(|l| l.dir.clone())
    }

    pub fn set_commit_fault(&self, fault: Option<CommitFault>) {
        self.inner.shared.lock().fault = fault;
    }

    pub fn stats(&self) -> StoreStats {
        self.inner.shared.lock().stats
    }

    pub fn begin(&self) -> Result<Transaction> {
        {
            let s = self.inner.shared.lock();
            match s.status {
                Status::Open => {}
                Status::Closed => return Err(StoreError::Closed),
                Status::Crashed => return Err(StoreError::Crashed),
            }
        }
        Ok(Transaction {
            id: self.inner.next_tx.fetch_add(1, Ordering::Relaxed),
            inner: self.inner.clone(),
            ops: Vec::new(),
            map_writes: HashMap::new(),
            dequeued: HashMap::new(),
            created: HashSet::new(),
            held: Vec::new(),
            state: TxState::Open,
            on_commit: Vec::new(),
            on_abort: Vec::new(),
        })
    }

    /// Creates a queue in its own committed transaction. No-op if it exists.
    pub fn create_queue(&self, name: &str) -> Result<()> {
        if self.inner.shared.lock().image.queues.contains_key(name) {
            return Ok(());
        }
        let mut tx = self.begin()?;
        tx.create_queue(name)?;
        tx.commit()
    }

    /// Clone of the committed state.
    pub fn image(&self) -> StoreImage {
        self.inner.shared.lock().image.clone()
    }

    /// Runs `f` against the committed state without copying it.
    pub fn with_image<R>(&self, f: impl FnOnce(&StoreImage) -> R) -> R {
        f(&self.inner.shared.lock().image)
    }

    pub fn queue_len(&self, queue: &str) -> Option<usize> {
        self.inner.shared.lock().image.queues.get(queue).map(|q| q.len())
    }

    pub fn has_queue(&self, queue: &str) -> bool {
        self.inner.shared.lock().image.queues.contains_key(queue)
    }

    pub fn read(&self, map: &str, key: &[u8]) -> Option<Vec<u8>> {
        self.inner.shared.lock().image.maps.get(map).and_then(|m| m.get(key).cloned())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxState {
    Open,
    Committed,
    Aborted,
}

type Hook = Box<dyn FnOnce() + Send>;

/// A unit of all-or-nothing visibility. Dropping an open transaction aborts
/// it.
pub struct Transaction {
    id: u64,
    inner: Arc<Inner>,
    ops: Vec<LogOp>,
    map_writes: HashMap<(String, Vec<u8>), Option<Vec<u8>>>,
    dequeued: HashMap<String, usize>,
    created: HashSet<String>,
    held: Vec<LockKey>,
    state: TxState,
    on_commit: Vec<Hook>,
    on_abort: Vec<Hook>,
}

impl std::fmt::Debug for Transaction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transaction")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("ops", &self.ops.len())
            .finish()
    }
}

impl Transaction {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn state(&self) -> TxState {
        self.state
    }

    /// Buffered writes, in program order.
    pub fn write_set(&self) -> &[LogOp] {
        &self.ops
    }

    pub fn is_read_only(&self) -> bool {
        self.ops.is_empty()
    }

    fn check_open(&self) -> Result<()> {
        if self.state != TxState::Open {
            return Err(StoreError::NotOpen(self.id));
        }
        Ok(())
    }

    fn lock(&mut self, key: LockKey) -> Result<()> {
        if self.held.contains(&key) {
            return Ok(());
        }
        let timeout = self.inner.config.lock_timeout;
        let deadline = Instant::now() + timeout;
        let mut s = self.inner.shared.lock();
        loop {
            match s.status {
                Status::Open => {}
                Status::Closed => return Err(StoreError::Closed),
                Status::Crashed => return Err(StoreError::Crashed),
            }
            match s.locks.get(&key) {
                None => {
                    s.locks.insert(key.clone(), self.id);
                    drop(s);
                    self.held.push(key);
                    return Ok(());
                }
                Some(&owner) if owner == self.id => return Ok(()),
                Some(_) => {
                    if timeout.is_zero() || self.inner.released.wait_until(&mut s, deadline).timed_out() {
                        return Err(StoreError::Conflict(key.to_string()));
                    }
                }
            }
        }
    }

    /// Creates the queue as part of this transaction.
    pub fn create_queue(&mut self, queue: &str) -> Result<()> {
        self.check_open()?;
        self.created.insert(queue.to_owned());
        self.ops.push(LogOp::new(queue, OpCode::CreateQueue, vec![], vec![]));
        Ok(())
    }

    /// Drops the queue and everything in it at commit.
    pub fn drop_queue(&mut self, queue: &str) -> Result<()> {
        self.check_open()?;
        self.lock(LockKey::QueueHead(queue.to_owned()))?;
        self.ops.push(LogOp::new(queue, OpCode::DropQueue, vec![], vec![]));
        Ok(())
    }

    pub fn enqueue(&mut self, queue: &str, item: Vec<u8>) -> Result<()> {
        self.check_open()?;
        if !self.created.contains(queue) && !self.inner.shared.lock().image.queues.contains_key(queue) {
            return Err(StoreError::UnknownQueue(queue.to_owned()));
        }
        self.ops.push(LogOp::new(queue, OpCode::Enqueue, vec![], item));
        Ok(())
    }

    /// Tentatively removes the next committed element not yet dequeued by
    /// this transaction.
    pub fn try_dequeue(&mut self, queue: &str) -> Result<Option<Vec<u8>>> {
        let item = self.peek(queue)?;
        if item.is_some() {
            *self.dequeued.entry(queue.to_owned()).or_default() += 1;
            self.ops.push(LogOp::new(queue, OpCode::Dequeue, vec![], vec![]));
        }
        Ok(item)
    }

    /// The element [`try_dequeue`](Self::try_dequeue) would return, without
    /// consuming it.
    pub fn peek(&mut self, queue: &str) -> Result<Option<Vec<u8>>> {
        self.check_open()?;
        self.lock(LockKey::QueueHead(queue.to_owned()))?;
        let skip = self.dequeued.get(queue).copied().unwrap_or(0);
        let s = self.inner.shared.lock();
        match s.image.queues.get(queue) {
            Some(q) => Ok(q.get(skip).cloned()),
            None if self.created.contains(queue) => Ok(None),
            None => Err(StoreError::UnknownQueue(queue.to_owned())),
        }
    }

    pub fn get(&mut self, map: &str, key: &[u8]) -> Result<Option<Vec<u8>>> {
        self.check_open()?;
        self.lock(LockKey::MapKey(map.to_owned(), key.to_vec()))?;
        if let Some(w) = self.map_writes.get(&(map.to_owned(), key.to_vec())) {
            return Ok(w.clone());
        }
        let s = self.inner.shared.lock();
        Ok(s.image.maps.get(map).and_then(|m| m.get(key).cloned()))
    }

    pub fn set(&mut self, map: &str, key: &[u8], value: Vec<u8>) -> Result<()> {
        self.check_open()?;
        self.lock(LockKey::MapKey(map.to_owned(), key.to_vec()))?;
        self.map_writes.insert((map.to_owned(), key.to_vec()), Some(value.clone()));
        self.ops.push(LogOp::new(map, OpCode::MapSet, key.to_vec(), value));
        Ok(())
    }

    pub fn remove(&mut self, map: &str, key: &[u8]) -> Result<()> {
        self.check_open()?;
        self.lock(LockKey::MapKey(map.to_owned(), key.to_vec()))?;
        self.map_writes.insert((map.to_owned(), key.to_vec()), None);
        self.ops.push(LogOp::new(map, OpCode::MapRemove, key.to_vec(), vec![]));
        Ok(())
    }

    /// Committed entries whose key starts with `prefix`, overlaid with this
    /// transaction's own writes. Takes no locks.
    pub fn scan_prefix(&self, map: &str, prefix: &[u8]) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.check_open()?;
        let mut out: std::collections::BTreeMap<Vec<u8>, Vec<u8>> = {
            let s = self.inner.shared.lock();
            s.image
                .maps
                .get(map)
                .map(|m| {
                    m.range(prefix.to_vec()..)
                        .take_while(|(k, _)| k.starts_with(prefix))
                        .map(|(k, v)| (k.clone(), v.clone()))
                        .collect()
                })
                .unwrap_or_default()
        };
        for ((m, k), v) in &self.map_writes {
            if m == map && k.starts_with(prefix) {
                match v {
                    Some(v) => out.insert(k.clone(), v.clone()),
                    None => out.remove(k),
                };
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Runs `f` after a successful commit.
    pub fn on_commit(&mut self, f: impl FnOnce() + Send + 'static) {
        self.on_commit.push(Box::new(f));
    }

    /// Runs `f` if the transaction aborts or fails to commit.
    pub fn on_abort(&mut self, f: impl FnOnce() + Send + 'static) {
        self.on_abort.push(Box::new(f));
    }

    /// Atomically applies the write set. Read-only transactions append no
    /// record.
    pub fn commit(&mut self) -> Result<()> {
        self.check_open()?;
        if self.ops.is_empty() {
            self.finish(TxState::Committed);
            return Ok(());
        }
        let inner = self.inner.clone();
        let mut s = inner.shared.lock();
        match s.status {
            Status::Open => {}
            Status::Closed => {
                drop(s);
                self.finish(TxState::Aborted);
                return Err(StoreError::Closed);
            }
            Status::Crashed => {
                drop(s);
                self.finish(TxState::Aborted);
                return Err(StoreError::Crashed);
            }
        }
        let crash = s.fault.as_mut().is_some_and(|f| f());
        if crash {
            s.status = Status::Crashed;
            s.locks.clear();
            drop(s);
            inner.released.notify_all();
            self.finish(TxState::Aborted);
            return Err(StoreError::Crashed);
        }
        // Records carry commit order, not begin order, so that replay can
        // skip everything a snapshot already covers.
        let record = LogRecord {
            tx_id: s.last_tx + 1,
            ops: std::mem::take(&mut self.ops),
        };
        // Validate against a scratch copy of the touched collections only
        // when applying could fail; apply is all-or-nothing because every
        // failing case is detected before mutation below.
        if let Err(e) = precheck(&s.image, &record) {
            drop(s);
            self.finish(TxState::Aborted);
            return Err(e);
        }
        if let Err(e) = append(&mut s, &record, inner.config.fsync) {
            s.status = Status::Crashed;
            s.locks.clear();
            drop(s);
            inner.released.notify_all();
            self.finish(TxState::Aborted);
            return Err(e);
        }
        s.image
            .apply_record(&record)
            .expect("record validated before apply");
        s.stats.commits += 1;
        s.stats.ops += record.ops.len() as u64;
        s.last_tx = record.tx_id;
        if let Err(e) = maybe_compact(&mut s, inner.config.compaction_threshold) {
            ::log::error!("log compaction failed: {e}");
        }
        for key in self.held.drain(..) {
            s.locks.remove(&key);
        }
        drop(s);
        inner.released.notify_all();
        self.state = TxState::Committed;
        self.on_abort.clear();
        for hook in self.on_commit.drain(..) {
            hook();
        }
        Ok(())
    }

    /// Discards the write set. Idempotent.
    pub fn abort(&mut self) {
        if self.state == TxState::Open {
            self.finish(TxState::Aborted);
        }
    }

    fn finish(&mut self, state: TxState) {
        if !self.held.is_empty() {
            let mut s = self.inner.shared.lock();
            for key in self.held.drain(..) {
                if s.locks.get(&key) == Some(&self.id) {
                    s.locks.remove(&key);
                }
            }
            drop(s);
            self.inner.released.notify_all();
        }
        self.state = state;
        self.ops.clear();
        self.map_writes.clear();
        self.dequeued.clear();
        let hooks = if state == TxState::Committed {
            self.on_abort.clear();
            std::mem::take(&mut self.on_commit)
        } else {
            self.on_commit.clear();
            std::mem::take(&mut self.on_abort)
        };
        for hook in hooks {
            hook();
        }
    }
}

impl Drop for Transaction {
    fn drop(&mut self) {
        self.abort();
    }
}

/// Checks that every op in `record` can be applied to `image` in order.
fn precheck(image: &StoreImage, record: &LogRecord) -> Result<()> {
    let mut lens: HashMap<&str, Option<usize>> = HashMap::new();
    for op in &record.ops {
        let name = op.collection.as_str();
        let len = lens
            .entry(name)
            .or_insert_with(|| image.queues.get(name).map(|q| q.len()));
        match op.code {
            OpCode::CreateQueue => {
                if len.is_none() {
                    *len = Some(0);
                }
            }
            OpCode::Enqueue => match len {
                Some(n) => *n += 1,
                None => return Err(StoreError::UnknownQueue(name.to_owned())),
            },
            OpCode::Dequeue => match len {
                Some(n) if *n > 0 => *n -= 1,
                _ => return Err(StoreError::UnknownQueue(name.to_owned())),
            },
            OpCode::DropQueue => *len = None,
            OpCode::MapSet | OpCode::MapRemove | OpCode::DropMap => {}
        }
    }
    Ok(())
}

fn append(s: &mut Shared, record: &LogRecord, policy: FsyncPolicy) -> Result<()> {
    let Some(log) = s.log.as_mut() else {
        return Ok(());
    };
    let bytes = record.encode();
    log.wal.write_all(&bytes)?;
    log.len += bytes.len() as u64;
    s.stats.log_bytes += bytes.len() as u64;
    let sync = match policy {
        FsyncPolicy::Always => true,
        FsyncPolicy::Batched(n) => {
            log.unsynced += 1;
            log.unsynced >= n.max(1)
        }
        FsyncPolicy::Never => false,
    };
    if sync {
        log.wal.sync_data()?;
        log.unsynced = 0;
        s.stats.fsyncs += 1;
    }
    Ok(())
}

/// Writes the image as a single snapshot record, then truncates the log.
/// A crash between the rename and the truncate is harmless: replay skips
/// records at or below the snapshot's tx id.
fn maybe_compact(s: &mut Shared, threshold: u64) -> Result<()> {
    let Some(log) = s.log.as_ref() else {
        return Ok(());
    };
    if log.len < threshold {
        return Ok(());
    }
    let dir = log.dir.clone();
    let record = LogRecord {
        tx_id: s.last_tx,
        ops: s.image.to_ops(),
    };
    let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&record.encode())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
    if let Ok(d) = File::open(&dir) {
        let _ = d.sync_all();
    }
    let log = s.log.as_mut().expect("checked above");
    log.wal.set_len(0)?;
    log.wal.sync_all()?;
    log.len = 0;
    s.stats.compactions += 1;
    Ok(())
}
