use std::path::PathBuf;
use std::time::Duration;

use crate::storage::{FsyncPolicy, StoreConfig};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue { line: usize, key: String, reason: String },
    #[error("batch_size must be in 1..=1024, got {0}")]
    BatchSize(usize),
}

/// Settings for one partition's host. Loadable from a `key=value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct HostConfig {
    pub partition: String,
    /// Every partition in the cluster, used for placement and id encoding.
    /// Defaults to just this partition.
    pub partitions: Vec<String>,
    /// Log directory; `None` keeps the store in memory.
    pub store_path: Option<PathBuf>,
    pub batch_size: usize,
    /// One shared map for all inboxes/outboxes instead of a queue pair per
    /// machine.
    pub shared_queues: bool,
    /// When false, delivered events sit in memory and the sender is only
    /// acknowledged after processing commits.
    pub persistent_inbox: bool,
    pub fsync: FsyncPolicy,
    pub seed: u64,
    pub max_redeliveries: u32,
    /// Fresh ids are reserved durably in blocks of this size.
    pub id_block: u64,
    /// Bump the id counter inside the creating handler's transaction instead
    /// of reserving blocks eagerly.
    pub transactional_ids: bool,
    pub lock_timeout: Duration,
    pub compaction_threshold: u64,
    /// Frames per outgoing batch.
    pub drain_batch: usize,
    pub ack_timeout: Duration,
    pub max_backoff: Duration,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            partition: "p0".into(),
            partitions: Vec::new(),
            store_path: None,
            batch_size: 16,
            shared_queues: true,
            persistent_inbox: true,
            fsync: FsyncPolicy::Always,
            seed: 0,
            max_redeliveries: 5,
            id_block: 1024,
            transactional_ids: false,
            lock_timeout: Duration::from_secs(10),
            compaction_threshold: 64 << 20,
            drain_batch: 16,
            ack_timeout: Duration::from_millis(50),
            max_backoff: Duration::from_secs(1),
        }
    }
}

impl HostConfig {
    pub fn new(partition: &str) -> Self {
        HostConfig {
            partition: partition.to_owned(),
            ..HostConfig::default()
        }
    }

    pub fn store_config(&self) -> StoreConfig {
        StoreConfig {
            fsync: self.fsync,
            compaction_threshold: self.compaction_threshold,
            lock_timeout: self.lock_timeout,
        }
    }

    /// Known partitions, always including this one.
    pub fn cluster(&self) -> Vec<String> {
        let mut v = self.partitions.clone();
        if !v.contains(&self.partition) {
            v.push(self.partition.clone());
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=1024).contains(&self.batch_size) {
            return Err(ConfigError::BatchSize(self.batch_size));
        }
        Ok(())
    }

    /// Ack timeout for the given retransmission attempt (0-based), with
    /// exponential backoff.
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.ack_timeout
            .saturating_mul(1u32.checked_shl(attempt.min(20)).unwrap_or(u32::MAX))
            .min(self.max_backoff)
    }

    /// Parses `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = HostConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |reason: String| ConfigError::BadValue {
                line,
                key: k.to_owned(),
                reason,
            };
            let parse_bool = |v: &str| match v {
                "true" | "on" | "1" | "yes" => Ok(true),
                "false" | "off" | "0" | "no" => Ok(false),
                _ => Err(bad(format!("`{v}` is not a boolean"))),
            };
            let parse_u64 = |v: &str| v.parse::<u64>().map_err(|e| bad(e.to_string()));
            match k {
                "partition" => c.partition = v.to_owned(),
                "partitions" => c.partitions = v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect(),
                "store_path" | "store" => c.store_path = (!v.is_empty() && v != "memory").then(|| PathBuf::from(v)),
                "batch_size" => c.batch_size = parse_u64(v)? as usize,
                "shared_queues" => c.shared_queues = parse_bool(v)?,
                "persistent_inbox" => c.persistent_inbox = parse_bool(v)?,
                "fsync" => c.fsync = v.parse().map_err(bad)?,
                "seed" => c.seed = parse_u64(v)?,
                "max_redeliveries" => c.max_redeliveries = parse_u64(v)? as u32,
                "id_block" => c.id_block = parse_u64(v)?.max(1),
                "transactional_ids" => c.transactional_ids = parse_bool(v)?,
                "lock_timeout_ms" => c.lock_timeout = Duration::from_millis(parse_u64(v)?),
                "compaction_threshold" => c.compaction_threshold = parse_u64(v)?,
                "drain_batch" => c.drain_batch = parse_u64(v)?.max(1) as usize,
                "ack_timeout_ms" => c.ack_timeout = Duration::from_millis(parse_u64(v)?),
                "max_backoff_ms" => c.max_backoff = Duration::from_millis(parse_u64(v)?),
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: k.to_owned(),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}
