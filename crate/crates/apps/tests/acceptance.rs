//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;
#[path = "../../semantics/tests/oracle/mod.rs"]
mod oracle;

use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsm_apps::bench;
use rsm_apps::poolserver::PoolOptions;
use rsm_apps::programs::{prop1, prop2, prop3, ClientOp, PoolProgram};
use rsm_apps::wordcount::{self, WordCountOptions};
use rsm_core::codec::{from_bytes, to_bytes};
use rsm_core::network::FaultConfig;
use rsm_core::sim::{Sim, SimConfig};
use rsm_core::storage::{FsyncPolicy, StoreImage};
use rsm_core::{HostConfig, RsmId, Store, StoreConfig};
use rsm_semantics::check::{check_program_transparency, TransparencyOptions};
use rsm_semantics::gen::{self, GenOptions};
use rsm_testkit::{explore, CrashPolicy, ExploreConfig, MonitorFactory, Report, TestProgram};

type Verdict = Result<String, String>;

fn within(budget: Duration, start: Instant, detail: String) -> Verdict {
    let took = start.elapsed();
    if took > budget {
        return Err(format!("{detail}; took {took:.1?}, budget {budget:?}"));
    }
    Ok(format!("{detail}; {took:.1?}"))
}

fn failure_transparency() -> Verdict {
    let start = Instant::now();
    let gen_opts = GenOptions::default();
    let opts = TransparencyOptions {
        max_resets: 4,
        ..TransparencyOptions::default()
    };
    if gen_opts.max_machines > 3 || gen_opts.max_stmts > 6 || gen_opts.small > 3 {
        return Err(format!("generator bounds too large: {gen_opts:?}"));
    }
    let (mut programs, mut runs) = (0, 0);
    for seed in 0..24u64 {
        let p = gen::program(seed, &gen_opts);
        let r = check_program_transparency(&p, seed, 3, &opts).map_err(|e| format!("program {seed}: {e}"))?;
        if let Some(v) = r.violations.first() {
            return Err(format!("program {seed}: {v}\n{p}"));
        }
        programs += 1;
        runs += r.runs;
    }
    within(
        Duration::from_secs(300),
        start,
        format!("{programs} generated programs, {runs} runs with up to 4 resets all match the reset-free run"),
    )
}

fn exactly_once_delivery() -> Verdict {
    let start = Instant::now();
    let messages = 10_000u64;
    let fault = FaultConfig {
        drop_prob: 0.3,
        duplicate_prob: 0.2,
        reorder_prob: 0.5,
        reorder_window: 8,
        seed: 42,
        ..FaultConfig::default()
    };
    let config = SimConfig {
        partitions: vec!["a".into(), "b".into()],
        host: HostConfig {
            batch_size: 4,
            ..HostConfig::default()
        },
        fault,
        crash_every: Some(50),
        seed: 42,
        ..SimConfig::default()
    };
    let mut sim = Sim::new(config, common::registry()).map_err(|e| e.to_string())?;
    let ids: Vec<RsmId> = ["a", "b", "a", "b"]
        .iter()
        .map(|p| sim.create("Relay", p))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for (i, id) in ids.iter().enumerate() {
        sim.send(id, common::SETUP, to_bytes(&ids[(i + 1) % ids.len()]));
    }
    let mut env_seq = vec![0u64; ids.len()];
    for m in 0..messages {
        let k = m as usize % ids.len();
        env_seq[k] += 1;
        sim.send(&ids[k], common::INJECT, to_bytes(&env_seq[k]));
        if m % 16 == 15 {
            for _ in 0..4 {
                sim.round().map_err(|e| e.to_string())?;
            }
        }
    }
    let stats = sim.run_until_quiescent().map_err(|e| e.to_string())?;
    sim.check_counter_coherence()?;
    let field = |id: &RsmId, f: &str| -> Result<u64, String> {
        let h = sim.host(&id.partition).ok_or("missing host")?;
        h.read_field::<u64>(id, f).map_err(|e| e.to_string())?.ok_or_else(|| format!("{id} has no {f}"))
    };
    let mut sent = Vec::new();
    for id in &ids {
        sent.push(field(id, "sent")?);
    }
    if sent.iter().sum::<u64>() != messages {
        return Err(format!("relays forwarded {sent:?}, expected {messages} in total"));
    }
    for (i, id) in ids.iter().enumerate() {
        let pred = (i + ids.len() - 1) % ids.len();
        let expect = env_seq[i] + sent[pred];
        let got = field(id, "received")?;
        if got != expect {
            return Err(format!("{id} processed {got} events, expected {expect}"));
        }
        let v = field(id, "violations")?;
        if v != 0 {
            return Err(format!("{id} saw {v} out-of-order events"));
        }
    }
    if stats.crashes == 0 {
        return Err("no crashes were injected".into());
    }
    within(
        Duration::from_secs(120),
        start,
        format!(
            "{} deliveries exactly once and in order, {} crashes, counters coherent",
            2 * messages,
            stats.crashes
        ),
    )
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Model {
    map: BTreeMap<Vec<u8>, Vec<u8>>,
    queue: VecDeque<Vec<u8>>,
}

impl Model {
    fn of(img: &StoreImage) -> Model {
        Model {
            map: img.map("m").cloned().unwrap_or_default(),
            queue: img.queue("q").cloned().unwrap_or_default(),
        }
    }
}

fn crash_atomicity() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Store::open(
        dir.path(),
        StoreConfig {
            fsync: FsyncPolicy::Never,
            ..StoreConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    store.create_queue("q").map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut model = Model::of(&store.image());
    let mut states = vec![model.clone()];
    for _ in 0..500 {
        let mut tx = store.begin().map_err(|e| e.to_string())?;
        let mut pushed = Vec::new();
        for _ in 0..rng.gen_range(1..6) {
            match rng.gen_range(0..4) {
                0 => {
                    let (k, v) = (vec![rng.gen_range(0..16u8)], vec![rng.gen::<u8>(); rng.gen_range(1..8)]);
                    tx.set("m", &k, v.clone()).map_err(|e| e.to_string())?;
                    model.map.insert(k, v);
                }
                1 => {
                    let k = vec![rng.gen_range(0..16u8)];
                    tx.remove("m", &k).map_err(|e| e.to_string())?;
                    model.map.remove(&k);
                }
                2 => {
                    let v = vec![rng.gen::<u8>(); rng.gen_range(1..8)];
                    tx.enqueue("q", v.clone()).map_err(|e| e.to_string())?;
                    pushed.push(v);
                }
                _ => {
                    let got = tx.try_dequeue("q").map_err(|e| e.to_string())?;
                    if got != model.queue.pop_front() {
                        return Err("store queue diverged from the model".into());
                    }
                }
            }
        }
        model.queue.extend(pushed);
        tx.commit().map_err(|e| e.to_string())?;
        states.push(model.clone());
    }
    store.close();
    let wal = std::fs::read(dir.path().join("wal.log")).map_err(|e| e.to_string())?;
    let mut last = 0usize;
    for cut in 0..=wal.len() {
        let (img, _) = Store::recover_from_bytes(None, &wal[..cut]).map_err(|e| format!("cut {cut}: {e}"))?;
        let got = Model::of(&img);
        let from = last.saturating_sub(1);
        let k = match states[from..].iter().position(|s| *s == got) {
            Some(i) => from + i,
            None => return Err(format!("truncation at byte {cut} recovered a state that is no committed prefix")),
        };
        last = last.max(k + 1);
    }
    if last != states.len() {
        return Err(format!("the full log recovered only {} of {} transactions", last - 1, states.len() - 1));
    }
    within(
        Duration::from_secs(180),
        start,
        format!("{} truncation points of a 500-transaction log all recover a committed prefix", wal.len() + 1),
    )
}

/// Zipf-ish corpus whose most frequent word is unique.
fn corpus(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 400;
    let weights: Vec<f64> = (1..=vocab).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    (0..n)
        .map(|_| {
            let mut x = rng.gen::<f64>() * total;
            let mut i = 0;
            while i + 1 < vocab && x >= weights[i] {
                x -= weights[i];
                i += 1;
            }
            format!("word{}", (i * 7919 + seed as usize) % 100_003)
        })
        .collect()
}

fn sequential_max(words: &[String]) -> Option<(String, u64)> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for w in words {
        *counts.entry(w).or_default() += 1;
    }
    let high = *counts.values().max()?;
    let mut top = counts.iter().filter(|(_, c)| **c == high);
    let (w, _) = top.next()?;
    if top.next().is_some() {
        return None;
    }
    Some((w.to_string(), high))
}

fn word_count() -> Verdict {
    let start = Instant::now();
    let mut crashes = 0;
    for seed in 0..10u64 {
        let words = corpus(seed, 10_000);
        let expect = sequential_max(&words).ok_or_else(|| format!("seed {seed}: corpus has no unique maximum"))?;
        let config = SimConfig {
            partitions: vec!["wc".into()],
            host: HostConfig {
                batch_size: 8,
                ..HostConfig::default()
            },
            fault: FaultConfig::lossless(seed),
            crash_every: Some(20),
            seed,
            ..SimConfig::default()
        };
        let mut sim = Sim::new(config, wordcount::registry(WordCountOptions::default())).map_err(|e| e.to_string())?;
        let main = sim.create(wordcount::MAIN, "wc").map_err(|e| e.to_string())?;
        sim.send(&main, wordcount::INIT, to_bytes(&4u32));
        for (i, w) in words.iter().enumerate() {
            sim.send(&main, wordcount::WORD, to_bytes(w));
            if i % 64 == 63 {
                sim.round().map_err(|e| e.to_string())?;
            }
        }
        let stats = sim.run_until_quiescent().map_err(|e| e.to_string())?;
        crashes += stats.crashes;
        let last = sim.env_outputs().last().ok_or_else(|| format!("seed {seed}: no output"))?;
        let got: (String, u64) = from_bytes(&last.event.payload).map_err(|e| e.to_string())?;
        if got != expect {
            return Err(format!("seed {seed}: reported {got:?}, the sequential count gives {expect:?}"));
        }
        if stats.crashes == 0 {
            return Err(format!("seed {seed}: no crashes were injected"));
        }
    }
    Ok(format!(
        "10 seeds x 10000 words over 4 shards match the sequential count; {crashes} crashes; {:.1?}",
        start.elapsed()
    ))
}

fn pool_run(ops: Vec<ClientOp>, opts: PoolOptions, monitors: &[MonitorFactory], cfg: &ExploreConfig) -> Result<Report, String> {
    let p = PoolProgram::new(ops, opts);
    explore(&p as &dyn TestProgram, monitors, cfg).map_err(|e| e.to_string())
}

fn first_violation(r: &Report) -> String {
    r.violations.first().map(|v| format!("{}: {}", v.monitor, v.message)).unwrap_or_default()
}

fn pool_server() -> Verdict {
    let start = Instant::now();
    let depth = ExploreConfig {
        iterations: 100,
        seed: 2024,
        max_steps: 10_000,
        crashes: CrashPolicy::Random(0.05),
        ..ExploreConfig::default()
    };
    let ops = vec![ClientOp::Create(10), ClientOp::Resize(4), ClientOp::Resize(12), ClientOp::Resize(7)];
    let r = pool_run(ops, PoolOptions::default(), &[prop1()], &depth)?;
    if !r.passed() {
        return Err(format!("property 1: {}", first_violation(&r)));
    }
    let safety_steps = r.total_steps;

    let live = ExploreConfig {
        iterations: 10,
        ..depth.clone()
    };
    let r = pool_run(vec![ClientOp::Create(100), ClientOp::Resize(5)], PoolOptions::default(), &[prop1(), prop2(5)], &live)?;
    if !r.passed() {
        return Err(format!("property 2 at Create(100)+Resize(5): {}", first_violation(&r)));
    }
    let r = pool_run(vec![ClientOp::Create(50), ClientOp::Delete], PoolOptions::default(), &[prop1(), prop3()], &live)?;
    if !r.passed() {
        return Err(format!("property 3 at Create(50)+Delete: {}", first_violation(&r)));
    }

    let mutant = |no_creating_count, volatile_created_count| PoolOptions {
        no_creating_count,
        volatile_created_count,
        ..PoolOptions::default()
    };
    let find = ExploreConfig {
        iterations: 100,
        ..depth.clone()
    };
    let r = pool_run(vec![ClientOp::Create(10), ClientOp::Resize(4)], mutant(true, false), &[prop1()], &find)?;
    let m1 = match r.violations.first() {
        Some(v) if v.monitor == "prop1" => v.iteration,
        _ => return Err("removing the CreatingCount updates went undetected in 100 iterations".into()),
    };
    let find_liveness = ExploreConfig {
        check_writes: false,
        ..find.clone()
    };
    let r = pool_run(vec![ClientOp::Create(10)], mutant(false, true), &[prop1(), prop2(10)], &find_liveness)?;
    let m2 = match r.violations.first() {
        Some(v) if v.monitor == "prop2" => v.iteration,
        _ => return Err(format!("volatile CreatedCount went undetected as a property 2 violation: {}", first_violation(&r))),
    };
    Ok(format!(
        "property 1 over 100 iterations ({safety_steps} steps), properties 2-3 at Create(100)+Resize(5) and Create(50)+Delete; mutants caught in iteration {m1} and {m2}; {:.1?}",
        start.elapsed()
    ))
}

fn three(mut f: impl FnMut() -> Result<f64, String>) -> Result<Vec<f64>, String> {
    (0..3).map(|_| f()).collect()
}

fn min(v: Vec<f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

fn max(v: Vec<f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn relative_performance() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut run = 0;
    let mut creation = |shared| {
        run += 1;
        let d = dir.path().join(format!("c{run}"));
        bench::creation(&d, 1000, shared, FsyncPolicy::Always).map(|r| r.value).map_err(|e| e.to_string())
    };
    let shared = min(three(|| creation(true))?);
    let dedicated = min(three(|| creation(false))?);
    let speedup = dedicated / shared;

    let mut run = 0;
    let mut tp = |batch| {
        run += 1;
        let d = dir.path().join(format!("t{run}"));
        bench::throughput(&d, 2000, 100, batch, FsyncPolicy::Always).map(|r| r.value).map_err(|e| e.to_string())
    };
    let b1 = max(three(|| tp(1))?);
    let b16 = max(three(|| tp(16))?);
    let gain = b16 / b1;

    let w = |persistent| bench::durable_writes(1000, persistent).map(|r| r.value).map_err(|e| e.to_string());
    let (with_inbox, without) = (w(true)?, w(false)?);

    let detail = format!(
        "creation speedup {speedup:.2}x, batch-16/batch-1 {gain:.2}x, writes per message {with_inbox} -> {without}"
    );
    if speedup >= 2.0 && gain >= 1.5 && with_inbox >= 2.0 && without == 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rule_faithfulness() -> Verdict {
    let mut instances = 0;
    for (i, rule) in oracle::instances::LOCAL_RULES.iter().enumerate() {
        let t = oracle::instances::local_rule(rule, 1000, 17 + i as u64);
        if !t.agreed() {
            return Err(format!("{rule}: {}", t.mismatches[0]));
        }
        instances += 1000;
    }
    for (i, rule) in oracle::instances::GLOBAL_RULES.iter().enumerate() {
        let t = oracle::instances::global_rule(rule, 1000, 91 + i as u64);
        if !t.agreed() {
            return Err(format!("{rule}: {}", t.mismatches[0]));
        }
        instances += 1000;
    }
    Ok(format!(
        "{instances} instances over {} local and {} global rules agree with the oracle",
        oracle::instances::LOCAL_RULES.len(),
        oracle::instances::GLOBAL_RULES.len()
    ))
}

fn main() -> std::process::ExitCode {
    let criteria: [(&str, fn() -> Verdict); 7] = [
        ("failure transparency", failure_transparency),
        ("exactly-once delivery", exactly_once_delivery),
        ("storage crash atomicity", crash_atomicity),
        ("word count under crashes", word_count),
        ("pool server properties", pool_server),
        ("relative performance", relative_performance),
        ("semantics rule faithfulness", rule_faithfulness),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}
