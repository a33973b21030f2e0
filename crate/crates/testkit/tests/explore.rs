use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rsm_core::codec::{from_bytes, to_bytes};
use rsm_core::model::{MachineClass, Registry, RsmId};
use rsm_testkit::mock::{self, MockConfig};
use rsm_testkit::{
    explore, liveness, replay, safety, CrashPolicy, ExploreConfig, MonitorFactory, MonitorKind, Observation,
    Strategy, TestError, TestProgram, World,
};

const INCR: u32 = 1;
const GOT: u32 = 2;

/// A relay that numbers incoming events and forwards them to a sink, which
/// announces each number it receives.
struct Relay {
    events: usize,
    leak: bool,
    random: bool,
}

impl Relay {
    fn new(events: usize) -> Self {
        Relay {
            events,
            leak: false,
            random: false,
        }
    }
}

impl TestProgram for Relay {
    fn name(&self) -> &str {
        "relay"
    }

    fn registry(&self) -> Arc<Registry> {
        let leak = self.leak;
        let random = self.random;
        let relay = MachineClass::builder("Relay")
            .persistent("count", 0u64)
            .persistent("sink", RsmId::env())
            .volatile("seen", 0u64)
            .start("Run")
            .on("Run", INCR, move |ctx| {
                let seen = ctx.get_volatile::<u64>("seen")? + 1;
                ctx.set_volatile("seen", &seen)?;
                let n = ctx.load::<u64>("count")? + 1;
                ctx.store("count", &n)?;
                if leak {
                    ctx.store("last_seen", &seen)?;
                }
                let tag = if random { ctx.random_u64() } else { 0 };
                let sink: RsmId = ctx.load("sink")?;
                let sink = if sink.is_env() {
                    let s = ctx.create("Sink")?;
                    ctx.store("sink", &s)?;
                    s
                } else {
                    sink
                };
                ctx.send_value(&sink, GOT, &(n, tag))
            });
        let relay = if leak { relay.persistent("last_seen", 0u64) } else { relay };
        let sink = MachineClass::builder("Sink")
            .persistent_map("got")
            .start("Run")
            .on("Run", GOT, |ctx| {
                let (n, tag): (u64, u64) = ctx.payload()?;
                ctx.store_entry("got", &n, &tag)?;
                ctx.announce("got", to_bytes(&n))
            });
        Arc::new(
            Registry::new()
                .with(relay.build().unwrap())
                .unwrap()
                .with(sink.build().unwrap())
                .unwrap(),
        )
    }

    fn setup(&self, world: &mut World) -> Result<(), TestError> {
        let r = world.create("Relay")?;
        world.ticker(&r, INCR, self.events);
        Ok(())
    }
}

/// Every number arrives once, in order, and all of them arrive.
fn exactly_once(total: u64) -> MonitorFactory {
    liveness(
        "exactly-once",
        0u64,
        |next, obs, _| {
            if let Observation::Announce(a) = obs {
                let n: u64 = from_bytes(&a.payload).unwrap();
                if n != *next + 1 {
                    return Err(format!("expected {} but got {n}", *next + 1));
                }
                *next = n;
            }
            Ok(())
        },
        move |next| *next < total,
    )
}

fn config(crashes: CrashPolicy) -> ExploreConfig {
    ExploreConfig {
        iterations: 10,
        seed: 7,
        max_steps: 2_000,
        crashes,
        ..ExploreConfig::default()
    }
}

#[test]
fn every_commit_crashing_still_delivers_each_event_once() {
    let report = explore(&Relay::new(50), &[exactly_once(50)], &config(CrashPolicy::EveryCommit)).unwrap();
    assert!(report.passed(), "{}", report.to_json());
    assert_eq!(report.iterations, 10);
    assert!(report.crashes >= 10 * 100, "one crash per handler commit: {}", report.crashes);
    assert_eq!(report.coverage["Relay/1"], 500);
    assert_eq!(report.coverage["Sink/2"], 500);
}

#[test]
fn random_draws_replay_after_a_crash() {
    let p = Relay {
        random: true,
        ..Relay::new(30)
    };
    let report = explore(&p, &[exactly_once(30)], &config(CrashPolicy::EveryCommit)).unwrap();
    assert!(report.passed(), "{}", report.to_json());
}

#[test]
fn volatile_state_reaching_a_persistent_field_is_reported() {
    let p = Relay {
        leak: true,
        ..Relay::new(20)
    };
    let report = explore(&p, &[], &config(CrashPolicy::Random(0.2))).unwrap();
    let v = &report.violations[0];
    assert_eq!(v.monitor, "non-interference");
    assert_eq!(v.kind, MonitorKind::Safety);
    assert!(v.message.contains("`last_seen`"), "{}", v.message);
    assert!(v.message.contains("ctx.random_"), "{}", v.message);

    let clean = explore(&p, &[], &config(CrashPolicy::Never)).unwrap();
    assert!(clean.passed());

    let unchecked = ExploreConfig {
        check_writes: false,
        ..config(CrashPolicy::Random(0.2))
    };
    assert!(explore(&p, &[], &unchecked).unwrap().passed());
}

#[test]
fn single_machine_crash_verdict() {
    for (leak, ok) in [(false, true), (true, false)] {
        let p = Relay { leak, ..Relay::new(3) };
        let mut w = World::new(p.registry(), 1, CrashPolicy::Never).unwrap();
        let r = w.create("Relay").unwrap();
        for _ in 0..3 {
            w.send(&r, INCR, Vec::new()).unwrap();
        }
        assert_eq!(w.inject_commit_crash(&r).unwrap(), Ok(true));
        let second = w.inject_commit_crash(&r).unwrap();
        assert_eq!(second.is_ok(), ok, "{second:?}");
    }
}

#[test]
fn an_iteration_seed_reproduces_the_run() {
    let p = Relay::new(40);
    let cfg = ExploreConfig {
        strategy: Strategy::Pct { depth: 3 },
        ..config(CrashPolicy::Random(0.3))
    };
    let a = explore(&p, &[exactly_once(40)], &cfg).unwrap();
    let b = explore(&p, &[exactly_once(40)], &cfg).unwrap();
    assert_eq!((a.total_steps, a.crashes, &a.coverage), (b.total_steps, b.crashes, &b.coverage));

    let seed = rsm_testkit::explore::iteration_seeds(cfg.seed).nth(3).unwrap();
    let x = replay(&p, &[exactly_once(40)], &cfg, seed).unwrap();
    let y = replay(&p, &[exactly_once(40)], &cfg, seed).unwrap();
    assert_eq!(x, y);
    assert!(x.crashes > 0);
}

#[test]
fn violations_carry_a_replayable_seed_and_trace() {
    let never = liveness("never-done", (), |_, _, _| Ok(()), |_| true);
    let cfg = config(CrashPolicy::Never);
    let report = explore(&Relay::new(5), &[never.clone()], &cfg).unwrap();
    assert_eq!(report.violations.len(), 1);
    let v = &report.violations[0];
    assert_eq!(v.kind, MonitorKind::Liveness);
    assert!(v.message.contains("still hot"), "{}", v.message);
    assert!(!v.trace.is_empty());
    let again = replay(&Relay::new(5), &[never], &cfg, v.iteration_seed).unwrap();
    assert_eq!(again.violation.as_ref(), Some(v));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["violations"][0]["kind"], "liveness");
}

#[test]
fn a_cold_monitor_passes_and_a_safety_failure_stops_the_run() {
    let cold = safety("cold", (), |_, _, _| Ok(()));
    assert!(explore(&Relay::new(5), &[cold], &config(CrashPolicy::Never)).unwrap().passed());

    let no_three = safety("no-three", (), |_, obs, _| match obs {
        Observation::Announce(a) if from_bytes::<u64>(&a.payload).unwrap() == 3 => Err("saw 3".into()),
        _ => Ok(()),
    });
    let report = explore(&Relay::new(5), &[no_three], &config(CrashPolicy::Never)).unwrap();
    assert_eq!(report.iterations, 1);
    assert_eq!(report.violations[0].message, "saw 3");
}

struct Tenant;

const GO: u32 = 1;

impl TestProgram for Tenant {
    fn name(&self) -> &str {
        "tenant"
    }

    fn registry(&self) -> Arc<Registry> {
        let tenant = MachineClass::builder("Tenant")
            .persistent("provider", RsmId::env())
            .persistent_map("held")
            .start("Run")
            .on("Run", GO, |ctx| {
                let p = ctx.create(mock::CLASS)?;
                ctx.store("provider", &p)?;
                for tag in 0..10u64 {
                    ctx.send_value(&p, mock::ALLOCATE, &tag)?;
                }
                Ok(())
            })
            .on("Run", mock::ALLOCATED, |ctx| {
                let (tag, r): (u64, u64) = ctx.payload()?;
                let p: RsmId = ctx.load("provider")?;
                if tag % 2 == 0 {
                    ctx.send_value(&p, mock::RELEASE, &r)
                } else {
                    ctx.store_entry("held", &r, &tag)
                }
            })
            .on("Run", mock::ALLOC_FAILED, |_| Ok(()))
            .on("Run", mock::RELEASED, |_| Ok(()));
        Arc::new(
            Registry::new()
                .with(tenant.build().unwrap())
                .unwrap()
                .with(mock::provider_class(MockConfig::default()))
                .unwrap(),
        )
    }

    fn setup(&self, world: &mut World) -> Result<(), TestError> {
        let t = world.create("Tenant")?;
        world.send(&t, GO, Vec::new())
    }
}

#[test]
fn mock_provider_tracks_exactly_the_held_resources() {
    let cfg = config(CrashPolicy::Random(0.3));
    for seed in rsm_testkit::explore::iteration_seeds(3).take(10) {
        let mut w = World::new(Tenant.registry(), seed, cfg.crashes).unwrap();
        Tenant.setup(&mut w).unwrap();
        let mut s = rsm_testkit::Scheduler::new(Strategy::Random, seed, 1000);
        loop {
            let ts = w.tasks();
            if ts.is_empty() {
                break;
            }
            let i = s.pick(&ts);
            w.run_task(&ts[i]).unwrap();
        }
        assert!(w.take_mismatches().is_empty());
        let host = w.host();
        let ids = host.machines();
        let (tenant, provider) = (&ids[0], &ids[1]);
        let held: BTreeSet<u64> = host.read_entries::<u64, u64>(tenant, "held").unwrap().into_iter().map(|(r, _)| r).collect();
        let live: BTreeSet<u64> = mock::live_resources(host, provider).unwrap().into_iter().map(|(r, _)| r).collect();
        assert_eq!(held, live);
        assert!(held.iter().all(|r| *r >= 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exactly_once_under_random_crashes(seed in any::<u64>(), p in 0.0..0.9f64, events in 1..30usize) {
        let cfg = ExploreConfig {
            iterations: 1,
            seed,
            max_steps: 5_000,
            crashes: CrashPolicy::Random(p),
            ..ExploreConfig::default()
        };
        let r = explore(&Relay::new(events), &[exactly_once(events as u64)], &cfg).unwrap();
        prop_assert!(r.passed(), "{}", r.to_json());
    }
}
