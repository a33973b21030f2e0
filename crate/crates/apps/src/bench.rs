//! Microbenchmarks: machine creation, ping-pong latency, processing
//! throughput and durable writes per delivered message.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rsm_core::cluster::LocalCluster;
use rsm_core::model::{MachineClass, Registry, RsmId};
use rsm_core::network::WireFrame;
use rsm_core::runtime::{HostError, LoopOutcome};
use rsm_core::storage::FsyncPolicy;
use rsm_core::{Event, HostConfig, MachineHost};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("host: {0}")]
    Host(#[from] HostError),
    #[error("cluster: {0}")]
    Cluster(#[from] rsm_core::cluster::ClusterError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
}

/// One measurement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub scenario: String,
    pub config: String,
    pub metric: String,
    pub value: f64,
    pub unit: String,
}

impl Row {
    fn new(scenario: &str, config: &str, metric: &str, value: f64, unit: &str) -> Self {
        Row {
            scenario: scenario.into(),
            config: config.into(),
            metric: metric.into(),
            value,
            unit: unit.into(),
        }
    }
}

pub fn write_csv<W: std::io::Write>(rows: &[Row], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const PING: u32 = 1;
const PONG: u32 = 2;
const DATA: u32 = 3;

/// Echo machines for the benchmarks: `Sink` adds payload sizes to a
/// persistent total, `Relay` forwards to its peer, `Echo` answers the env.
pub fn registry() -> Arc<Registry> {
    let sink = MachineClass::builder("Sink")
        .persistent("bytes", 0u64)
        .start("Run")
        .on("Run", DATA, |ctx| {
            let n = ctx.event().payload.len() as u64;
            let b: u64 = ctx.load("bytes")?;
            ctx.store("bytes", &(b + n))
        })
        .build()
        .expect("sink class");
    let relay = MachineClass::builder("Relay")
        .persistent("peer", RsmId::env())
        .start("Run")
        .on("Run", PONG, |ctx| {
            let peer: RsmId = ctx.payload()?;
            ctx.store("peer", &peer)
        })
        .on("Run", PING, |ctx| {
            let peer: RsmId = ctx.load("peer")?;
            let p = ctx.event().payload.clone();
            ctx.send(&peer, DATA, p)
        })
        .build()
        .expect("relay class");
    let echo = MachineClass::builder("Echo")
        .start("Run")
        .on("Run", DATA, |ctx| {
            let p = ctx.event().payload.clone();
            ctx.send(&RsmId::env(), DATA, p)
        })
        .build()
        .expect("echo class");
    Arc::new(Registry::new().with(sink).and_then(|r| r.with(relay)).and_then(|r| r.with(echo)).expect("classes"))
}

fn file_host(dir: &Path, partition: &str, fsync: FsyncPolicy, f: impl FnOnce(&mut HostConfig)) -> Result<MachineHost, BenchError> {
    let mut cfg = HostConfig {
        store_path: Some(dir.join(partition)),
        fsync,
        ..HostConfig::new(partition)
    };
    f(&mut cfg);
    Ok(MachineHost::open(cfg, registry())?)
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Sequentially creates `n` machines; mean time per creation.
pub fn creation(dir: &Path, n: usize, shared_queues: bool, fsync: FsyncPolicy) -> Result<Row, BenchError> {
    let host = file_host(dir, &format!("create-{}", on_off(shared_queues)), fsync, |c| c.shared_queues = shared_queues)?;
    let start = Instant::now();
    for _ in 0..n {
        host.create_local("Sink")?;
    }
    let ms = start.elapsed().as_secs_f64() * 1e3 / n as f64;
    host.store().close();
    Ok(Row::new(
        "creation",
        &format!("n={n};shared_queues={}", on_off(shared_queues)),
        "mean_per_machine",
        ms,
        "ms",
    ))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[i]
}

/// Round trips env → relay (partition a) → echo (partition b) → env, one
/// message at a time.
pub fn latency(dir: &Path, messages: usize, payload: usize, fsync: FsyncPolicy) -> Result<Vec<Row>, BenchError> {
    let configs = ["a", "b"]
        .iter()
        .map(|p| HostConfig {
            store_path: Some(dir.join(format!("lat-{p}"))),
            fsync,
            ack_timeout: Duration::from_millis(20),
            ..HostConfig::new(p)
        })
        .collect();
    let cluster = LocalCluster::start(configs, registry())?;
    let relay = cluster.create("Relay", "a")?;
    let echo = cluster.create("Echo", "b")?;
    cluster.send(&relay, PONG, rsm_core::to_bytes(&echo));
    cluster.wait_quiescent(Duration::from_secs(30)).map_err(|_| BenchError::Timeout("setup"))?;
    let mut samples = Vec::with_capacity(messages);
    for _ in 0..messages {
        let start = Instant::now();
        cluster.send(&relay, PING, vec![7u8; payload]);
        cluster
            .outputs()
            .recv_timeout(Duration::from_secs(30))
            .map_err(|_| BenchError::Timeout("echo"))?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    cluster.shutdown();
    samples.sort_by(f64::total_cmp);
    let mean = samples.iter().sum::<f64>() / samples.len().max(1) as f64;
    let config = format!("messages={messages};payload={payload}");
    let mut rows: Vec<Row> = [("p50", 0.5), ("p90", 0.9), ("p99", 0.99)]
        .iter()
        .map(|(m, q)| Row::new("latency", &config, m, quantile(&samples, *q), "ms"))
        .collect();
    rows.push(Row::new("latency", &config, "mean", mean, "ms"));
    Ok(rows)
}

/// Processing throughput of one machine draining `messages` preloaded
/// events with handler batches of `batch`.
pub fn throughput(dir: &Path, messages: usize, payload: usize, batch: usize, fsync: FsyncPolicy) -> Result<Row, BenchError> {
    let name = format!("tp-{batch}");
    let id = {
        let host = file_host(dir, &name, FsyncPolicy::Never, |_| {})?;
        let id = host.create_local("Sink")?;
        for _ in 0..messages {
            host.enqueue_local(&id, Event::new(RsmId::env(), DATA, vec![1u8; payload]))?;
        }
        host.store().close();
        id
    };
    let host = file_host(dir, &name, fsync, |c| c.batch_size = batch)?;
    let start = Instant::now();
    while host.inbox_len(&id) > 0 {
        if let LoopOutcome::Failed { error, .. } = host.event_loop_step(&id)? {
            log::warn!("sink failed: {error}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    host.store().close();
    let mb = (messages * payload) as f64 / (1 << 20) as f64;
    Ok(Row::new(
        "throughput",
        &format!("messages={messages};payload={payload};batch={batch}"),
        "throughput",
        mb / secs,
        "MB/s",
    ))
}

/// Durable commits on the receiving partition per delivered and processed
/// message.
pub fn durable_writes(messages: usize, persistent_inbox: bool) -> Result<Row, BenchError> {
    let host = MachineHost::open(
        HostConfig {
            persistent_inbox,
            batch_size: 1,
            fsync: FsyncPolicy::Never,
            ..HostConfig::new("w")
        },
        registry(),
    )?;
    let id = host.create_local("Sink")?;
    let before = host.store().stats().commits;
    for seq in 0..messages as u64 {
        let ev = Event::new(RsmId::new("x", 1), DATA, vec![0u8; 16]);
        host.ingest(&[WireFrame::message(ev.source.clone(), seq, id.clone(), &ev)])?;
        host.event_loop_step(&id)?;
    }
    let commits = host.store().stats().commits - before;
    Ok(Row::new(
        "durable_writes",
        &format!("messages={messages};persistent_inbox={}", on_off(persistent_inbox)),
        "writes_per_message",
        commits as f64 / messages as f64,
        "writes",
    ))
}
