//! The example applications packaged for the systematic tester, with their
//! specification monitors.

use std::collections::BTreeMap;
use std::sync::Arc;

use rsm_core::codec::{from_bytes, to_bytes};
use rsm_core::model::{Registry, RsmId};
use rsm_core::MachineHost;
use rsm_testkit::mock;
use rsm_testkit::{liveness, safety, MonitorFactory, Observation, TestError, TestProgram, World};

use crate::bank;
use crate::poolserver::{self, PoolInfo, PoolOptions};
use crate::wordcount::{self, WordCountOptions};

/// A program plus its monitors, by name.
pub trait NamedMonitors {
    fn named_monitors(&self) -> Vec<(&'static str, MonitorFactory)>;
}

pub struct WordCountProgram {
    pub words: Vec<String>,
    pub shards: u32,
    pub opts: WordCountOptions,
}

impl TestProgram for WordCountProgram {
    fn name(&self) -> &str {
        "wordcount"
    }

    fn registry(&self) -> Arc<Registry> {
        wordcount::registry(self.opts)
    }

    fn setup(&self, world: &mut World) -> Result<(), TestError> {
        let main = world.create(wordcount::MAIN)?;
        world.send(&main, wordcount::INIT, to_bytes(&self.shards))?;
        world.feed(&main, self.words.iter().map(|w| (wordcount::WORD, to_bytes(w))));
        Ok(())
    }

    fn monitors(&self) -> Vec<MonitorFactory> {
        self.named_monitors().into_iter().map(|(_, m)| m).collect()
    }
}

impl NamedMonitors for WordCountProgram {
    fn named_monitors(&self) -> Vec<(&'static str, MonitorFactory)> {
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for w in &self.words {
            *freq.entry(w).or_default() += 1;
        }
        let high = freq.values().copied().max().unwrap_or(0);
        let freq: BTreeMap<String, u64> = freq.into_iter().map(|(w, f)| (w.to_owned(), f)).collect();
        let max_output = liveness(
            "max-word",
            (0u64, false),
            move |(last, done), obs, _| {
                if let Observation::Env(e) = obs {
                    let (word, f): (String, u64) = from_bytes(&e.event.payload).map_err(|e| e.to_string())?;
                    if f <= *last {
                        return Err(format!("output frequency went from {last} to {f}"));
                    }
                    if freq.get(&word).copied().unwrap_or(0) < f {
                        return Err(format!("reported `{word}` with frequency {f}, more than it occurs"));
                    }
                    *last = f;
                    *done = f == high;
                }
                Ok(())
            },
            |(_, done)| !done,
        );
        vec![("max-word", max_output)]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientOp {
    Create(u64),
    Resize(i64),
    Delete,
}

pub struct PoolProgram {
    /// Starts with a `Create`.
    pub ops: Vec<ClientOp>,
    pub opts: PoolOptions,
    /// Health-check rounds the client triggers.
    pub health_ticks: usize,
}

impl PoolProgram {
    pub fn new(ops: Vec<ClientOp>, opts: PoolOptions) -> Self {
        PoolProgram {
            ops,
            opts,
            health_ticks: 3,
        }
    }

    /// The pool size the last request asks for.
    pub fn final_size(&self) -> Option<u64> {
        let mut size = None;
        for op in &self.ops {
            match op {
                ClientOp::Create(n) => size = Some(*n),
                ClientOp::Resize(n) if *n >= 0 && size.is_some() => size = Some(*n as u64),
                ClientOp::Resize(_) => {}
                ClientOp::Delete => return None,
            }
        }
        size
    }
}

fn provider_of(host: &MachineHost) -> Option<RsmId> {
    host.machines().into_iter().find(|id| host.class_of(id).as_deref() == Some(mock::CLASS))
}

fn live_count(host: &MachineHost) -> Result<usize, String> {
    let p = provider_of(host).ok_or("no resource provider")?;
    mock::live_resources(host, &p).map(|v| v.len()).map_err(|e| e.to_string())
}

/// After every scale operation, resources under creation plus created ones
/// equal the desired count.
pub fn prop1() -> MonitorFactory {
    safety("prop1", (), |_, obs, _| {
        if let Observation::Announce(a) = obs {
            if a.topic == poolserver::TOPIC_SCALED {
                let (desired, creating, created): (i64, i64, i64) = from_bytes(&a.payload).map_err(|e| e.to_string())?;
                if creating + created != desired {
                    return Err(format!(
                        "{}: after scaling, creating {creating} + created {created} != desired {desired}",
                        a.machine
                    ));
                }
            }
        }
        Ok(())
    })
}

/// Eventually the pool is `Created` with exactly `size` live resources.
pub fn prop2(size: u64) -> MonitorFactory {
    liveness(
        "prop2",
        (false, String::new()),
        move |(ok, why), obs, host| {
            if let Observation::Announce(a) = obs {
                if a.topic == poolserver::TOPIC_POOL {
                    let (state, _, _, creating, created, _): PoolInfo = from_bytes(&a.payload).map_err(|e| e.to_string())?;
                    *ok = false;
                    *why = format!("pool is {state} with {created} created and {creating} creating");
                    if state == "Created" && created == size as i64 {
                        let live = live_count(host)?;
                        *ok = live == size as usize;
                        *why = format!("pool is Created but the provider holds {live} resources, not {size}");
                    }
                }
            }
            Ok(())
        },
        |(ok, _)| !ok,
    )
}

/// After deletion, eventually the pool and all its resources are gone.
pub fn prop3() -> MonitorFactory {
    liveness(
        "prop3",
        false,
        |done, obs, host| {
            if let Observation::Env(e) = obs {
                if e.event.event_type == poolserver::POOL_DELETED {
                    let rms = host
                        .machines()
                        .iter()
                        .filter(|id| host.class_of(id).as_deref() == Some(poolserver::RM))
                        .count();
                    let live = live_count(host)?;
                    if rms > 0 || live > 0 {
                        return Err(format!("pool reported deleted with {rms} live resource managers and {live} resources"));
                    }
                    *done = true;
                }
            }
            Ok(())
        },
        |done| !done,
    )
}

impl TestProgram for PoolProgram {
    fn name(&self) -> &str {
        "poolserver"
    }

    fn registry(&self) -> Arc<Registry> {
        poolserver::registry(self.opts)
    }

    fn setup(&self, world: &mut World) -> Result<(), TestError> {
        let Some(ClientOp::Create(n)) = self.ops.first() else {
            return Err(TestError::Setup("the first request must create the pool".into()));
        };
        let provider = world.create(mock::CLASS)?;
        let pm = world.create(poolserver::PM)?;
        world.send(&pm, poolserver::CREATE_POOL, to_bytes(&(*n, provider)))?;
        world.feed(
            &pm,
            self.ops[1..].iter().map(|op| match op {
                ClientOp::Create(n) => (poolserver::RESIZE_POOL, to_bytes(&(*n as i64))),
                ClientOp::Resize(n) => (poolserver::RESIZE_POOL, to_bytes(n)),
                ClientOp::Delete => (poolserver::DELETE_POOL, to_bytes(&())),
            }),
        );
        world.ticker(&pm, poolserver::HEALTH_TICK, self.health_ticks);
        Ok(())
    }

    fn monitors(&self) -> Vec<MonitorFactory> {
        self.named_monitors().into_iter().map(|(_, m)| m).collect()
    }
}

impl NamedMonitors for PoolProgram {
    fn named_monitors(&self) -> Vec<(&'static str, MonitorFactory)> {
        let mut v = vec![("prop1", prop1())];
        match self.final_size() {
            Some(n) => v.push(("prop2", prop2(n))),
            None => v.push(("prop3", prop3())),
        }
        v
    }
}

pub struct BankProgram {
    pub accounts: usize,
    pub opening: i64,
    pub brokers: usize,
    /// `(from, to, amount)` by account index.
    pub transfers: Vec<(usize, usize, i64)>,
}

impl TestProgram for BankProgram {
    fn name(&self) -> &str {
        "bank"
    }

    fn registry(&self) -> Arc<Registry> {
        bank::registry()
    }

    fn setup(&self, world: &mut World) -> Result<(), TestError> {
        let accounts = (0..self.accounts)
            .map(|_| world.create(bank::ACCOUNT))
            .collect::<Result<Vec<_>, _>>()?;
        for a in &accounts {
            world.send(a, bank::OPEN, to_bytes(&self.opening))?;
        }
        for b in 0..self.brokers.max(1) {
            let broker = world.create(bank::BROKER)?;
            let mine = self.transfers.iter().skip(b).step_by(self.brokers.max(1));
            let events: Vec<(u32, Vec<u8>)> = mine
                .map(|(f, t, amount)| (bank::TRANSFER, to_bytes(&(accounts[*f].clone(), accounts[*t].clone(), *amount))))
                .collect();
            world.feed(&broker, events);
        }
        Ok(())
    }

    fn monitors(&self) -> Vec<MonitorFactory> {
        self.named_monitors().into_iter().map(|(_, m)| m).collect()
    }
}

impl NamedMonitors for BankProgram {
    fn named_monitors(&self) -> Vec<(&'static str, MonitorFactory)> {
        let opening = self.opening;
        let conserved = safety("conservation", 0i64, move |opened, obs, host| {
            if let Observation::Handled { event, .. } = obs {
                if event.event_type == bank::OPEN {
                    *opened += opening;
                }
                let now = bank::total_money(host)?;
                if now != *opened {
                    return Err(format!("money in the system is {now}, expected {opened}"));
                }
            }
            Ok(())
        });
        let n = self.transfers.len();
        let finished = liveness(
            "transfers-finish",
            0usize,
            |done, obs, _| {
                if let Observation::Env(e) = obs {
                    if e.event.event_type == bank::TRANSFER_DONE {
                        *done += 1;
                    }
                }
                Ok(())
            },
            move |done| *done < n,
        );
        vec![("conservation", conserved), ("transfers-finish", finished)]
    }
}
