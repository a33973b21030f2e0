mod common;

use common::{registry, INJECT, SETUP};
use rsm_core::network::FaultConfig;
use rsm_core::sim::{Sim, SimConfig};
use rsm_core::{to_bytes, HostConfig, RsmId};

struct Outcome {
    received: Vec<u64>,
    sent: Vec<u64>,
    violations: u64,
    crashes: u64,
}

fn run(messages: u64, fault: FaultConfig, crash_every: Option<u64>, cut_links: bool, seed: u64) -> Outcome {
    let config = SimConfig {
        partitions: vec!["a".into(), "b".into()],
        host: HostConfig {
            batch_size: 4,
            ..HostConfig::default()
        },
        fault,
        crash_every,
        seed,
        ..SimConfig::default()
    };
    let mut sim = Sim::new(config, registry()).unwrap();
    let ids: Vec<RsmId> = ["a", "b", "a", "b"].iter().map(|p| sim.create("Relay", p).unwrap()).collect();
    for (i, id) in ids.iter().enumerate() {
        sim.send(id, SETUP, to_bytes(&ids[(i + 1) % ids.len()]));
    }
    let mut env_seq = vec![0u64; ids.len()];
    for m in 0..messages {
        let k = (m as usize) % ids.len();
        env_seq[k] += 1;
        sim.send(&ids[k], INJECT, to_bytes(&env_seq[k]));
        if cut_links && m == messages / 3 {
            sim.transport_mut().set_link("a", "b", false);
        }
        if cut_links && m == messages / 2 {
            sim.transport_mut().set_link("a", "b", true);
            sim.transport_mut().set_link("b", "a", false);
        }
        if cut_links && m == 2 * messages / 3 {
            sim.transport_mut().set_link("b", "a", true);
        }
        if m % 16 == 15 {
            for _ in 0..4 {
                sim.round().unwrap();
            }
        }
    }
    sim.run_until_quiescent().unwrap();
    sim.check_counter_coherence().unwrap();
    let mut out = Outcome {
        received: Vec::new(),
        sent: Vec::new(),
        violations: 0,
        crashes: sim.stats().crashes,
    };
    for id in &ids {
        let h = sim.host(&id.partition).unwrap();
        out.received.push(h.read_field::<u64>(id, "received").unwrap().unwrap());
        out.sent.push(h.read_field::<u64>(id, "sent").unwrap().unwrap());
        out.violations += h.read_field::<u64>(id, "violations").unwrap().unwrap();
        assert!(h.dead_letters().is_empty());
    }
    out
}

fn check(out: &Outcome, messages: u64) {
    let n = out.received.len() as u64;
    assert_eq!(out.violations, 0);
    assert_eq!(out.sent.iter().sum::<u64>(), messages);
    for (i, r) in out.received.iter().enumerate() {
        let pred = (i + out.received.len() - 1) % out.received.len();
        let from_env = messages / n + u64::from((i as u64) < messages % n);
        assert_eq!(*r, from_env + out.sent[pred], "machine {i}");
    }
}

#[test]
fn lossless_network_delivers_everything_once() {
    let out = run(400, FaultConfig::lossless(1), None, false, 1);
    check(&out, 400);
    assert_eq!(out.crashes, 0);
}

#[test]
fn faulty_network_with_crashes_still_delivers_exactly_once() {
    let fault = FaultConfig {
        drop_prob: 0.3,
        duplicate_prob: 0.2,
        reorder_prob: 0.5,
        reorder_window: 8,
        seed: 7,
        ..FaultConfig::default()
    };
    let out = run(600, fault, Some(50), true, 7);
    check(&out, 600);
    assert!(out.crashes > 0);
}

#[test]
fn runs_are_reproducible() {
    let fault = FaultConfig {
        drop_prob: 0.2,
        duplicate_prob: 0.1,
        reorder_prob: 0.3,
        reorder_window: 4,
        seed: 3,
        ..FaultConfig::default()
    };
    let a = run(120, fault.clone(), Some(17), false, 3);
    let b = run(120, fault, Some(17), false, 3);
    assert_eq!(a.received, b.received);
    assert_eq!(a.crashes, b.crashes);
}
