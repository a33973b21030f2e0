//! Deterministic multi-partition simulation.
//!
//! Every partition runs a [`MachineHost`] over an in-memory store; packets
//! travel through a [`FaultyTransport`] on a virtual clock. Optionally the
//! store of a partition crashes at every Nth commit attempt, after which the
//! host is rebuilt from the store's committed state. Given the same seed a
//! run is bit-for-bit reproducible.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{Announcement, Envelope, Registry, RsmId, ENV_PARTITION};
use crate::network::{EnvClient, FaultConfig, FaultyTransport, FrameKind, Packet, TransportStats, WireFrame};
use crate::runtime::{AckOutcome, DrainOutcome, HostConfig, HostError, LoopOutcome, MachineHost};
use crate::storage::Store;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("host {partition}: {source}")]
    Host {
        partition: String,
        #[source]
        source: HostError,
    },
    #[error("no quiescence after {rounds} rounds")]
    Stalled { rounds: u64 },
    #[error("unknown partition `{0}`")]
    UnknownPartition(String),
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub partitions: Vec<String>,
    /// Template for every host; partition names and store settings are
    /// filled in per partition.
    pub host: HostConfig,
    pub fault: FaultConfig,
    /// Crash a partition's store at every Nth commit attempt on it.
    pub crash_every: Option<u64>,
    pub max_rounds: u64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            partitions: vec!["p0".into()],
            host: HostConfig::default(),
            fault: FaultConfig::default(),
            crash_every: None,
            max_rounds: 10_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimStats {
    pub rounds: u64,
    pub crashes: u64,
    pub virtual_time_us: u64,
    pub retransmissions: u64,
    pub env_retransmissions: u64,
}

struct SimHost {
    host: MachineHost,
    commits: Arc<AtomicU64>,
}

pub struct Sim {
    config: SimConfig,
    registry: Arc<Registry>,
    hosts: BTreeMap<String, SimHost>,
    net: FaultyTransport,
    env: EnvClient,
    now: u64,
    timers: BTreeMap<(String, RsmId), u64>,
    env_deadline: Option<u64>,
    env_attempts: u32,
    env_outputs: Vec<Envelope>,
    announcements: Vec<Announcement>,
    rng: ChaCha8Rng,
    stats: SimStats,
}

fn install_fault(store: &Store, every: Option<u64>, commits: &Arc<AtomicU64>) {
    let Some(n) = every.filter(|n| *n > 0) else {
        return;
    };
    let c = commits.clone();
    store.set_commit_fault(Some(Box::new(move || (c.fetch_add(1, Ordering::SeqCst) + 1) % n == 0)));
}

impl Sim {
    pub fn new(config: SimConfig, registry: Arc<Registry>) -> Result<Sim, SimError> {
        let mut hosts = BTreeMap::new();
        for p in &config.partitions {
            let hc = Sim::host_config(&config, p);
            let store = Store::in_memory_with(hc.store_config());
            let commits = Arc::new(AtomicU64::new(0));
            install_fault(&store, config.crash_every, &commits);
            let host = MachineHost::start(hc, store, registry.clone()).map_err(|source| SimError::Host {
                partition: p.clone(),
                source,
            })?;
            hosts.insert(p.clone(), SimHost { host, commits });
        }
        Ok(Sim {
            net: FaultyTransport::new(config.fault.clone()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            registry,
            hosts,
            env: EnvClient::new(),
            now: 0,
            timers: BTreeMap::new(),
            env_deadline: None,
            env_attempts: 0,
            env_outputs: Vec::new(),
            announcements: Vec::new(),
            stats: SimStats::default(),
        })
    }

    fn host_config(config: &SimConfig, partition: &str) -> HostConfig {
        let mut hc = config.host.clone();
        hc.partition = partition.to_owned();
        hc.partitions = config.partitions.clone();
        hc.store_path = None;
        hc.lock_timeout = std::time::Duration::ZERO;
        hc
    }

    pub fn host(&self, partition: &str) -> Option<&MachineHost> {
        self.hosts.get(partition).map(|h| &h.host)
    }

    pub fn hosts(&self) -> impl Iterator<Item = &MachineHost> {
        self.hosts.values().map(|h| &h.host)
    }

    pub fn stats(&self) -> SimStats {
        SimStats {
            virtual_time_us: self.now,
            ..self.stats
        }
    }

    pub fn transport_stats(&self) -> TransportStats {
        self.net.stats()
    }

    /// The simulated network, e.g. to cut links.
    pub fn transport_mut(&mut self) -> &mut FaultyTransport {
        &mut self.net
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn env_client(&self) -> &EnvClient {
        &self.env
    }

    /// Events machines sent to the environment, in drain order.
    pub fn env_outputs(&self) -> &[Envelope] {
        &self.env_outputs
    }

    pub fn take_env_outputs(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.env_outputs)
    }

    /// Announcements of committed handler runs, in commit order.
    pub fn announcements(&self) -> &[Announcement] {
        &self.announcements
    }

    /// Asks the environment client to create a machine on `partition`.
    pub fn create(&mut self, class: &str, partition: &str) -> Result<RsmId, SimError> {
        if !self.hosts.contains_key(partition) {
            return Err(SimError::UnknownPartition(partition.to_owned()));
        }
        let (id, frame) = self.env.create(class, partition);
        self.env_send_frames(vec![frame]);
        Ok(id)
    }

    /// Sends an event from the environment.
    pub fn send(&mut self, dest: &RsmId, event_type: u32, payload: Vec<u8>) {
        let frame = self.env.send(dest, event_type, payload);
        self.env_send_frames(vec![frame]);
    }

    fn env_send_frames(&mut self, frames: Vec<WireFrame>) {
        let mut by_partition: BTreeMap<String, Vec<WireFrame>> = BTreeMap::new();
        for f in frames {
            by_partition.entry(f.dest.partition.clone()).or_default().push(f);
        }
        for (to, frames) in by_partition {
            self.net.send(
                Packet {
                    from: ENV_PARTITION.to_owned(),
                    to,
                    frames,
                },
                self.now,
            );
        }
        if self.env_deadline.is_none() {
            self.env_attempts = 0;
            self.env_deadline = Some(self.now + self.backoff_us(0));
        }
    }

    fn backoff_us(&self, attempt: u32) -> u64 {
        self.config.host.backoff(attempt).as_micros() as u64
    }

    fn host_err(partition: &str, source: HostError) -> SimError {
        SimError::Host {
            partition: partition.to_owned(),
            source,
        }
    }

    /// Rebuilds a crashed partition from its store's committed state.
    /// Recovery may itself commit, and so crash again; keep trying.
    fn restart(&mut self, partition: &str) -> Result<(), SimError> {
        let commits = self.hosts[partition].commits.clone();
        let mut store = self.hosts[partition].host.store().clone();
        let host = loop {
            store = store.reopen().map_err(|e| Sim::host_err(partition, e.into()))?;
            install_fault(&store, self.config.crash_every, &commits);
            let hc = Sim::host_config(&self.config, partition);
            match MachineHost::start(hc, store.clone(), self.registry.clone()) {
                Ok(h) => break h,
                Err(e) if e.is_crash() => self.stats.crashes += 1,
                Err(e) => return Err(Sim::host_err(partition, e)),
            }
        };
        self.hosts.insert(partition.to_owned(), SimHost { host, commits });
        self.timers.retain(|(p, _), _| p != partition);
        self.stats.crashes += 1;
        log::debug!("t={} restarted {partition}", self.now);
        Ok(())
    }

    /// Handles a host error: crashes restart the partition, anything else is
    /// fatal.
    fn on_error(&mut self, partition: &str, e: HostError) -> Result<(), SimError> {
        if e.is_crash() {
            self.restart(partition)
        } else {
            Err(Sim::host_err(partition, e))
        }
    }

    fn send_acks(&mut self, from: &str, acks: Vec<WireFrame>) {
        let mut by_partition: BTreeMap<String, Vec<WireFrame>> = BTreeMap::new();
        for a in acks {
            by_partition.entry(a.sender.partition.clone()).or_default().push(a);
        }
        for (to, frames) in by_partition {
            self.net.send(
                Packet {
                    from: from.to_owned(),
                    to,
                    frames,
                },
                self.now,
            );
        }
    }

    fn is_quiescent(&self) -> bool {
        self.net.in_flight() == 0
            && self.env.is_idle()
            && self.timers.is_empty()
            && self
                .hosts
                .values()
                .all(|h| h.host.runnable().is_empty() && h.host.drainable().is_empty() && h.host.in_flight().is_empty())
    }

    /// Runs handler and drain steps on every partition once. Returns true
    /// if anything happened.
    fn work_round(&mut self) -> Result<bool, SimError> {
        let mut progress = false;
        let mut partitions: Vec<String> = self.hosts.keys().cloned().collect();
        partitions.shuffle(&mut self.rng);
        'partitions: for p in partitions {
            let mut runnable = self.hosts[&p].host.runnable();
            runnable.shuffle(&mut self.rng);
            for id in runnable {
                let r = self.hosts[&p].host.event_loop_step(&id);
                match r {
                    Ok(LoopOutcome::Processed(report)) => {
                        progress = true;
                        self.announcements.extend(report.announcements);
                        if !report.acks.is_empty() {
                            self.send_acks(&p, report.acks);
                        }
                    }
                    Ok(LoopOutcome::Failed { .. } | LoopOutcome::DeadLettered { .. } | LoopOutcome::CrashInjected) => {
                        progress = true
                    }
                    Ok(LoopOutcome::Idle | LoopOutcome::Busy) => {}
                    Err(e) => {
                        self.on_error(&p, e)?;
                        progress = true;
                        continue 'partitions;
                    }
                }
            }
            let mut drainable = self.hosts[&p].host.drainable();
            drainable.shuffle(&mut self.rng);
            for id in drainable {
                let r = self.hosts[&p].host.drain_begin(&id);
                match r {
                    Ok(DrainOutcome::Sent(packet)) => {
                        progress = true;
                        self.net.send(packet, self.now);
                        let deadline = self.now + self.backoff_us(0);
                        self.timers.insert((p.clone(), id), deadline);
                    }
                    Ok(DrainOutcome::Env(entries)) => {
                        progress = true;
                        self.env_outputs.extend(entries);
                    }
                    Ok(DrainOutcome::Idle | DrainOutcome::Busy) => {}
                    Err(e) => {
                        self.on_error(&p, e)?;
                        progress = true;
                        continue 'partitions;
                    }
                }
            }
        }
        Ok(progress)
    }

    fn deliver(&mut self, packet: Packet) -> Result<(), SimError> {
        if packet.to == ENV_PARTITION {
            for f in &packet.frames {
                if f.kind == FrameKind::Ack {
                    self.env.on_ack(f);
                }
            }
            if self.env.is_idle() {
                self.env_deadline = None;
            }
            return Ok(());
        }
        let p = packet.to.clone();
        if !self.hosts.contains_key(&p) {
            return Ok(());
        }
        let (acks, msgs): (Vec<WireFrame>, Vec<WireFrame>) =
            packet.frames.into_iter().partition(|f| f.kind == FrameKind::Ack);
        for a in &acks {
            let r = self.hosts[&p].host.drain_ack(a);
            match r {
                Ok(AckOutcome::Completed { sender, .. }) => {
                    self.timers.remove(&(p.clone(), sender));
                }
                Ok(_) => {}
                Err(e) => return self.on_error(&p, e),
            }
        }
        if !msgs.is_empty() {
            let r = self.hosts[&p].host.ingest(&msgs);
            match r {
                Ok(out) => {
                    if !out.acks.is_empty() {
                        self.send_acks(&p, out.acks);
                    }
                }
                Err(e) => return self.on_error(&p, e),
            }
        }
        Ok(())
    }

    fn fire_timers(&mut self) -> Result<bool, SimError> {
        let mut fired = false;
        let due: Vec<(String, RsmId)> = self
            .timers
            .iter()
            .filter(|(_, t)| **t <= self.now)
            .map(|(k, _)| k.clone())
            .collect();
        for key in due {
            let Some(h) = self.hosts.get(&key.0) else { continue };
            match h.host.drain_retransmit(&key.1) {
                Some((packet, attempts)) => {
                    self.stats.retransmissions += 1;
                    self.net.send(packet, self.now);
                    let deadline = self.now + self.backoff_us(attempts);
                    self.timers.insert(key, deadline);
                    fired = true;
                }
                None => {
                    self.timers.remove(&key);
                }
            }
        }
        if let Some(t) = self.env_deadline {
            if t <= self.now {
                if self.env.is_idle() {
                    self.env_deadline = None;
                } else {
                    self.env_attempts += 1;
                    self.stats.env_retransmissions += 1;
                    let frames: Vec<WireFrame> = self.env.pending().cloned().collect();
                    let deadline = self.now + self.backoff_us(self.env_attempts);
                    self.env_send_frames(frames);
                    self.env_deadline = Some(deadline);
                    fired = true;
                }
            }
        }
        Ok(fired)
    }

    /// Runs one scheduling round. Returns false once the system is
    /// quiescent.
    pub fn round(&mut self) -> Result<bool, SimError> {
        self.stats.rounds += 1;
        let mut progress = self.work_round()?;
        while let Some(packet) = self.net.poll(self.now) {
            self.deliver(packet)?;
            progress = true;
        }
        progress |= self.fire_timers()?;
        if progress {
            return Ok(true);
        }
        if self.is_quiescent() {
            return Ok(false);
        }
        let next = [
            self.net.next_due(),
            self.timers.values().min().copied(),
            self.env_deadline,
        ]
        .into_iter()
        .flatten()
        .min();
        match next {
            Some(t) => {
                self.now = self.now.max(t);
                Ok(true)
            }
            // Work remains but nothing can make progress: a blocked
            // delivery (destination not created yet) waits on a timer that
            // will fire; otherwise stop.
            None => Ok(false),
        }
    }

    pub fn run_until_quiescent(&mut self) -> Result<SimStats, SimError> {
        let start = self.stats.rounds;
        while self.round()? {
            if self.stats.rounds - start >= self.config.max_rounds {
                return Err(SimError::Stalled {
                    rounds: self.stats.rounds - start,
                });
            }
        }
        Ok(self.stats())
    }

    /// Checks that every send counter equals the matching receive counter.
    pub fn check_counter_coherence(&self) -> Result<(), String> {
        for h in self.hosts.values() {
            for ((s, d), c) in h.host.send_counters() {
                let Some(dh) = self.hosts.get(&d.partition) else {
                    return Err(format!("{s} sent to {d} on unknown partition"));
                };
                let r = dh.host.receive_counter(&d, &s);
                // a halted receiver acknowledges without counting
                if r != c && !(r < c && dh.host.is_halted(&d)) {
                    return Err(format!("send_counter[{s}->{d}]={c} but receive_counter={r}"));
                }
            }
            for ((d, s), r) in h.host.receive_counters() {
                let c = if s.is_env() {
                    self.env.sent_to(&d)
                } else {
                    match self.hosts.get(&s.partition) {
                        Some(sh) => sh.host.send_counter(&s, &d),
                        None => return Err(format!("{d} received from unknown {s}")),
                    }
                };
                if r != c {
                    return Err(format!("receive_counter[{d}<-{s}]={r} but sender counted {c}"));
                }
            }
        }
        Ok(())
    }
}
