//! Packet transports: a seeded fault-injecting simulator driven by virtual
//! time, an in-process channel hub, and TCP streams.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::wire::{FrameError, Packet, WireFrame};

#[derive(Clone, Debug)]
pub struct FaultConfig {
    pub drop_prob: f64,
    pub duplicate_prob: f64,
    /// Probability that a delivery picks a random packet among the first
    /// `reorder_window` due packets rather than the oldest.
    pub reorder_prob: f64,
    pub reorder_window: usize,
    /// Delivery delay is uniform in `[min_delay, max_delay]` virtual
    /// microseconds.
    pub min_delay: u64,
    pub max_delay: u64,
    pub seed: u64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig {
            drop_prob: 0.0,
            duplicate_prob: 0.0,
            reorder_prob: 0.0,
            reorder_window: 1,
            min_delay: 100,
            max_delay: 1_000,
            seed: 0,
        }
    }
}

impl FaultConfig {
    pub fn lossless(seed: u64) -> Self {
        FaultConfig {
            seed,
            ..FaultConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
    pub reordered: u64,
}

/// Simulated network. Every packet is independently dropped, duplicated and
/// delayed; deliveries may be reordered within a window. Fair: a packet
/// sent infinitely often is delivered infinitely often when
/// `drop_prob < 1`.
#[derive(Debug)]
pub struct FaultyTransport {
    config: FaultConfig,
    rng: ChaCha8Rng,
    pending: Vec<(u64, Packet)>,
    blocked: HashSet<(String, String)>,
    stats: TransportStats,
}

impl FaultyTransport {
    pub fn new(config: FaultConfig) -> Self {
        FaultyTransport {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            pending: Vec::new(),
            blocked: HashSet::new(),
            stats: TransportStats::default(),
        }
    }

    pub fn config(&self) -> &FaultConfig {
        &self.config
    }

    pub fn stats(&self) -> TransportStats {
        self.stats
    }

    /// Cuts (or restores) the link from `from` to `to`.
    pub fn set_link(&mut self, from: &str, to: &str, up: bool) {
        let key = (from.to_owned(), to.to_owned());
        if up {
            self.blocked.remove(&key);
        } else {
            self.blocked.insert(key);
        }
    }

    fn delay(&mut self) -> u64 {
        let (lo, hi) = (self.config.min_delay, self.config.max_delay.max(self.config.min_delay));
        self.rng.gen_range(lo..=hi)
    }

    pub fn send(&mut self, packet: Packet, now: u64) {
        self.stats.sent += 1;
        if self.blocked.contains(&(packet.from.clone(), packet.to.clone()))
            || self.rng.gen_bool(self.config.drop_prob.clamp(0.0, 1.0))
        {
            self.stats.dropped += 1;
            return;
        }
        if self.rng.gen_bool(self.config.duplicate_prob.clamp(0.0, 1.0)) {
            self.stats.duplicated += 1;
            let due = now + self.delay();
            self.pending.push((due, packet.clone()));
        }
        let due = now + self.delay();
        self.pending.push((due, packet));
    }

    /// Takes one packet due at `now`, if any.
    pub fn poll(&mut self, now: u64) -> Option<Packet> {
        let due: Vec<usize> = self
            .pending
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| *t <= now)
            .map(|(i, _)| i)
            .take(self.config.reorder_window.max(1))
            .collect();
        if due.is_empty() {
            return None;
        }
        let pick = if due.len() > 1 && self.rng.gen_bool(self.config.reorder_prob.clamp(0.0, 1.0)) {
            let k = self.rng.gen_range(0..due.len());
            if k > 0 {
                self.stats.reordered += 1;
            }
            due[k]
        } else {
            due[0]
        };
        self.stats.delivered += 1;
        Some(self.pending.remove(pick).1)
    }

    /// Earliest virtual time at which some packet becomes deliverable.
    pub fn next_due(&self) -> Option<u64> {
        self.pending.iter().map(|(t, _)| *t).min()
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    /// Drops every packet addressed to `partition`.
    pub fn purge_to(&mut self, partition: &str) {
        self.pending.retain(|(_, p)| p.to != partition);
    }
}

/// In-process hub: each partition registers a mailbox.
#[derive(Clone, Default)]
pub struct InProcessNetwork {
    mailboxes: Arc<Mutex<HashMap<String, Sender<Packet>>>>,
}

impl InProcessNetwork {
    pub fn new() -> Self {
        InProcessNetwork::default()
    }

    pub fn register(&self, partition: &str) -> Receiver<Packet> {
        let (tx, rx) = crossbeam_channel::unbounded();
        self.mailboxes.lock().insert(partition.to_owned(), tx);
        rx
    }

    /// Returns false if the destination is unknown or gone.
    pub fn send(&self, packet: Packet) -> bool {
        let tx = self.mailboxes.lock().get(&packet.to).cloned();
        match tx {
            Some(tx) => tx.send(packet).is_ok(),
            None => false,
        }
    }
}

/// Reads one frame from a stream of length-prefixed frames.
pub fn read_frame(r: &mut impl Read) -> io::Result<WireFrame> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len) as usize;
    if n > 64 << 20 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {n} bytes")));
    }
    let mut buf = vec![0u8; 4 + n];
    buf[..4].copy_from_slice(&len);
    r.read_exact(&mut buf[4..])?;
    WireFrame::decode(&buf)
        .map(|(f, _)| f)
        .map_err(|e: FrameError| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn write_hello(w: &mut impl Write, partition: &str) -> io::Result<()> {
    w.write_all(&(partition.len() as u32).to_le_bytes())?;
    w.write_all(partition.as_bytes())
}

fn read_hello(r: &mut impl Read) -> io::Result<String> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len) as usize;
    if n > 4096 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "oversized hello"));
    }
    let mut name = vec![0; n];
    r.read_exact(&mut name)?;
    String::from_utf8(name).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// TCP transport. A connection opens with the sender's partition name
/// (u32 length + bytes) followed by wire frames. Malformed frames close the
/// connection; the sender's retransmissions recover.
pub struct TcpTransport {
    partition: String,
    local: SocketAddr,
    peers: HashMap<String, SocketAddr>,
    conns: Mutex<HashMap<String, TcpStream>>,
    incoming: Receiver<Packet>,
}

impl TcpTransport {
    pub fn bind(partition: &str, addr: SocketAddr, peers: HashMap<String, SocketAddr>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let me = partition.to_owned();
        std::thread::Builder::new()
            .name(format!("tcp-accept-{partition}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let tx = tx.clone();
                    let me = me.clone();
                    std::thread::spawn(move || {
                        let mut r = BufReader::new(stream);
                        let Ok(from) = read_hello(&mut r) else { return };
                        loop {
                            match read_frame(&mut r) {
                                Ok(frame) => {
                                    let p = Packet {
                                        from: from.clone(),
                                        to: me.clone(),
                                        frames: vec![frame],
                                    };
                                    if tx.send(p).is_err() {
                                        return;
                                    }
                                }
                                Err(e) => {
                                    if e.kind() != io::ErrorKind::UnexpectedEof {
                                        log::warn!("dropping connection from {from}: {e}");
                                    }
                                    return;
                                }
                            }
                        }
                    });
                }
            })?;
        Ok(TcpTransport {
            partition: partition.to_owned(),
            local,
            peers,
            conns: Mutex::new(HashMap::new()),
            incoming: rx,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn add_peer(&mut self, partition: &str, addr: SocketAddr) {
        self.peers.insert(partition.to_owned(), addr);
    }

    pub fn incoming(&self) -> &Receiver<Packet> {
        &self.incoming
    }

    /// Best effort: errors drop the connection so the next send reconnects.
    pub fn send(&self, packet: &Packet) -> io::Result<()> {
        let addr = *self
            .peers
            .get(&packet.to)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no address for {}", packet.to)))?;
        let mut conns = self.conns.lock();
        if !conns.contains_key(&packet.to) {
            let mut s = TcpStream::connect(addr)?;
            s.set_nodelay(true)?;
            write_hello(&mut s, &self.partition)?;
            conns.insert(packet.to.clone(), s);
        }
        let s = conns.get_mut(&packet.to).expect("just inserted");
        let res = s.write_all(&packet.encode());
        if res.is_err() {
            conns.remove(&packet.to);
        }
        res
    }
}
