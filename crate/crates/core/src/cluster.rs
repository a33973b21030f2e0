//! Threaded in-process cluster: one worker thread per partition, packets
//! exchanged over an [`InProcessNetwork`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;

use crate::model::{Envelope, Registry, RsmId, ENV_PARTITION};
use crate::network::{EnvClient, FrameKind, InProcessNetwork, Packet, WireFrame};
use crate::runtime::{AckOutcome, DrainOutcome, HostConfig, HostError, LoopOutcome, MachineHost};

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("host {partition}: {source}")]
    Host {
        partition: String,
        #[source]
        source: HostError,
    },
    #[error("unknown partition `{0}`")]
    UnknownPartition(String),
    #[error("not quiescent after {0:?}")]
    Timeout(Duration),
}

struct Env {
    client: Mutex<EnvClient>,
    outputs: Sender<Envelope>,
}

pub struct LocalCluster {
    hosts: HashMap<String, Arc<MachineHost>>,
    net: InProcessNetwork,
    env: Arc<Env>,
    outputs: Receiver<Envelope>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

fn group_by_partition(frames: Vec<WireFrame>, route: impl Fn(&WireFrame) -> String) -> HashMap<String, Vec<WireFrame>> {
    let mut out: HashMap<String, Vec<WireFrame>> = HashMap::new();
    for f in frames {
        out.entry(route(&f)).or_default().push(f);
    }
    out
}

fn send_frames(net: &InProcessNetwork, from: &str, frames: Vec<WireFrame>, route: impl Fn(&WireFrame) -> String) {
    for (to, frames) in group_by_partition(frames, route) {
        net.send(Packet {
            from: from.to_owned(),
            to,
            frames,
        });
    }
}

impl LocalCluster {
    /// Starts one host per config. Every config's `partitions` is set to
    /// the full list.
    pub fn start(configs: Vec<HostConfig>, registry: Arc<Registry>) -> Result<LocalCluster, ClusterError> {
        let names: Vec<String> = configs.iter().map(|c| c.partition.clone()).collect();
        let net = InProcessNetwork::new();
        let (out_tx, out_rx) = crossbeam_channel::unbounded();
        let env = Arc::new(Env {
            client: Mutex::new(EnvClient::new()),
            outputs: out_tx,
        });
        let stop = Arc::new(AtomicBool::new(false));
        let mut hosts = HashMap::new();
        let mut workers = Vec::new();
        let mut ack_timeout = Duration::from_millis(50);
        for mut cfg in configs {
            cfg.partitions = names.clone();
            ack_timeout = ack_timeout.min(cfg.ack_timeout);
            let p = cfg.partition.clone();
            let host = Arc::new(MachineHost::open(cfg, registry.clone()).map_err(|source| ClusterError::Host {
                partition: p.clone(),
                source,
            })?);
            let inbox = net.register(&p);
            let (h, n, e, s) = (host.clone(), net.clone(), env.clone(), stop.clone());
            workers.push(
                std::thread::Builder::new()
                    .name(format!("host-{p}"))
                    .spawn(move || worker(h, n, inbox, e, s))
                    .expect("spawn worker"),
            );
            hosts.insert(p, host);
        }
        let inbox = net.register(ENV_PARTITION);
        let (n, e, s) = (net.clone(), env.clone(), stop.clone());
        workers.push(
            std::thread::Builder::new()
                .name("env".into())
                .spawn(move || env_worker(n, inbox, e, s, ack_timeout))
                .expect("spawn env"),
        );
        Ok(LocalCluster {
            hosts,
            net,
            env,
            outputs: out_rx,
            stop,
            workers,
        })
    }

    pub fn host(&self, partition: &str) -> Option<&Arc<MachineHost>> {
        self.hosts.get(partition)
    }

    pub fn create(&self, class: &str, partition: &str) -> Result<RsmId, ClusterError> {
        if !self.hosts.contains_key(partition) {
            return Err(ClusterError::UnknownPartition(partition.to_owned()));
        }
        let (id, frame) = self.env.client.lock().create(class, partition);
        self.net.send(Packet {
            from: ENV_PARTITION.to_owned(),
            to: partition.to_owned(),
            frames: vec![frame],
        });
        Ok(id)
    }

    pub fn send(&self, dest: &RsmId, event_type: u32, payload: Vec<u8>) {
        let frame = self.env.client.lock().send(dest, event_type, payload);
        self.net.send(Packet {
            from: ENV_PARTITION.to_owned(),
            to: dest.partition.clone(),
            frames: vec![frame],
        });
    }

    /// Events machines sent to the environment.
    pub fn outputs(&self) -> &Receiver<Envelope> {
        &self.outputs
    }

    fn idle(&self) -> bool {
        self.env.client.lock().is_idle()
            && self
                .hosts
                .values()
                .all(|h| h.runnable().is_empty() && h.drainable().is_empty() && h.in_flight().is_empty())
    }

    /// Waits until no host has work and every environment message is
    /// acknowledged.
    pub fn wait_quiescent(&self, timeout: Duration) -> Result<(), ClusterError> {
        let start = Instant::now();
        let mut stable = 0;
        while start.elapsed() < timeout {
            if self.idle() {
                stable += 1;
                if stable >= 3 {
                    return Ok(());
                }
            } else {
                stable = 0;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        Err(ClusterError::Timeout(timeout))
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        for h in self.hosts.values() {
            h.store().close();
        }
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

fn handle_packet(host: &MachineHost, net: &InProcessNetwork, timers: &mut HashMap<RsmId, Instant>, packet: Packet) {
    let p = host.partition();
    let (acks, msgs): (Vec<WireFrame>, Vec<WireFrame>) = packet.frames.into_iter().partition(|f| f.kind == FrameKind::Ack);
    for a in &acks {
        match host.drain_ack(a) {
            Ok(AckOutcome::Completed { sender, .. }) => {
                timers.remove(&sender);
            }
            Ok(_) => {}
            Err(e) => log::error!("{p}: {e}"),
        }
    }
    if !msgs.is_empty() {
        match host.ingest(&msgs) {
            Ok(out) => send_frames(net, p, out.acks, |f| f.sender.partition.clone()),
            Err(e) => log::error!("{p}: {e}"),
        }
    }
}

fn worker(host: Arc<MachineHost>, net: InProcessNetwork, inbox: Receiver<Packet>, env: Arc<Env>, stop: Arc<AtomicBool>) {
    let p = host.partition().to_owned();
    let mut timers: HashMap<RsmId, Instant> = HashMap::new();
    let report = |e: HostError| log::error!("{p}: {e}");
    while !stop.load(Ordering::SeqCst) {
        let mut busy = false;
        while let Ok(packet) = inbox.try_recv() {
            busy = true;
            handle_packet(&host, &net, &mut timers, packet);
        }
        for id in host.runnable() {
            match host.event_loop_step(&id) {
                Ok(LoopOutcome::Processed(r)) => {
                    busy = true;
                    send_frames(&net, &p, r.acks, |f| f.sender.partition.clone());
                }
                Ok(LoopOutcome::Idle | LoopOutcome::Busy) => {}
                Ok(_) => busy = true,
                Err(e) => report(e),
            }
        }
        for id in host.drainable() {
            match host.drain_begin(&id) {
                Ok(DrainOutcome::Sent(packet)) => {
                    busy = true;
                    net.send(packet);
                    timers.insert(id, Instant::now() + host.config().backoff(0));
                }
                Ok(DrainOutcome::Env(entries)) => {
                    busy = true;
                    for e in entries {
                        let _ = env.outputs.send(e);
                    }
                }
                Ok(DrainOutcome::Idle | DrainOutcome::Busy) => {}
                Err(e) => report(e),
            }
        }
        let now = Instant::now();
        let due: Vec<RsmId> = timers.iter().filter(|(_, t)| **t <= now).map(|(k, _)| k.clone()).collect();
        for id in due {
            match host.drain_retransmit(&id) {
                Some((packet, attempts)) => {
                    net.send(packet);
                    timers.insert(id, now + host.config().backoff(attempts));
                }
                None => {
                    timers.remove(&id);
                }
            }
        }
        if !busy {
            if let Ok(packet) = inbox.recv_timeout(Duration::from_millis(1)) {
                handle_packet(&host, &net, &mut timers, packet);
            }
        }
    }
}

fn env_worker(net: InProcessNetwork, inbox: Receiver<Packet>, env: Arc<Env>, stop: Arc<AtomicBool>, timeout: Duration) {
    let mut deadline = Instant::now() + timeout;
    while !stop.load(Ordering::SeqCst) {
        if let Ok(packet) = inbox.recv_timeout(Duration::from_millis(1)) {
            let mut c = env.client.lock();
            for f in &packet.frames {
                if f.kind == FrameKind::Ack {
                    c.on_ack(f);
                }
            }
        }
        if Instant::now() >= deadline {
            let frames: Vec<WireFrame> = env.client.lock().pending().cloned().collect();
            send_frames(&net, ENV_PARTITION, frames, |f| f.dest.partition.clone());
            deadline = Instant::now() + timeout;
        }
    }
}
