use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsm_core::storage::{FsyncPolicy, StoreImage};
use rsm_core::{Store, StoreConfig, StoreError};

#[derive(Clone, Debug)]
enum Op {
    Set(u8, u8),
    Remove(u8),
    Push(u8),
    Pop,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..8, any::<u8>()).prop_map(|(k, v)| Op::Set(k, v)),
        (0u8..8).prop_map(Op::Remove),
        any::<u8>().prop_map(Op::Push),
        Just(Op::Pop),
    ]
}

/// Plain-data model of a store with one map and one queue.
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

fn config() -> StoreConfig {
    StoreConfig {
        fsync: FsyncPolicy::Never,
        ..StoreConfig::default()
    }
}

/// Runs one transaction of `ops`; returns what the model looks like after it.
fn apply(store: &Store, model: &Model, ops: &[Op], commit: bool) -> Model {
    let mut next = model.clone();
    let mut tx = store.begin().unwrap();
    let mut pushed = Vec::new();
    for o in ops {
        match o {
            Op::Set(k, v) => {
                tx.set("m", &[*k], vec![*v]).unwrap();
                next.map.insert(vec![*k], vec![*v]);
            }
            Op::Remove(k) => {
                tx.remove("m", &[*k]).unwrap();
                next.map.remove(&vec![*k]);
            }
            Op::Push(v) => {
                tx.enqueue("q", vec![*v]).unwrap();
                pushed.push(vec![*v]);
            }
            Op::Pop => {
                let got = tx.try_dequeue("q").unwrap();
                assert_eq!(got, next.queue.pop_front());
            }
        }
    }
    next.queue.extend(pushed);
    if commit {
        tx.commit().unwrap();
        next
    } else {
        tx.abort();
        model.clone()
    }
}

fn fresh(dir: &std::path::Path) -> Store {
    let s = Store::open(dir, config()).unwrap();
    if !s.has_queue("q") {
        s.create_queue("q").unwrap();
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn store_matches_model_across_reopens(
        txs in prop::collection::vec((prop::collection::vec(op(), 0..6), any::<bool>(), prop::bool::weighted(0.1)), 1..40)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = fresh(dir.path());
        let mut model = Model::default();
        for (ops, commit, reopen) in &txs {
            model = apply(&store, &model, ops, *commit);
            prop_assert_eq!(Model::of(&store.image()), model.clone());
            if *reopen {
                store.crash();
                store = fresh(dir.path());
                prop_assert_eq!(Model::of(&store.image()), model.clone());
            }
        }
    }

    #[test]
    fn compaction_is_invisible(txs in prop::collection::vec(prop::collection::vec(op(), 1..6), 1..60)) {
        let dir = tempfile::tempdir().unwrap();
        let small = StoreConfig { compaction_threshold: 256, ..config() };
        let open = || {
            let s = Store::open(dir.path(), small.clone()).unwrap();
            if !s.has_queue("q") { s.create_queue("q").unwrap(); }
            s
        };
        let mut store = open();
        let mut model = Model::default();
        for (i, ops) in txs.iter().enumerate() {
            model = apply(&store, &model, ops, true);
            if i % 7 == 6 {
                store.close();
                store = open();
            }
        }
        prop_assert_eq!(Model::of(&store.image()), model);
    }
}

fn random_ops(rng: &mut ChaCha8Rng) -> Vec<Op> {
    (0..rng.gen_range(1..5))
        .map(|_| match rng.gen_range(0..4) {
            0 => Op::Set(rng.gen_range(0..8), rng.gen()),
            1 => Op::Remove(rng.gen_range(0..8)),
            2 => Op::Push(rng.gen()),
            _ => Op::Pop,
        })
        .collect()
}

#[test]
fn every_truncation_recovers_a_committed_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let store = fresh(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut states = vec![Model::of(&store.image())];
    let mut model = states[0].clone();
    for _ in 0..60 {
        model = apply(&store, &model, &random_ops(&mut rng), true);
        states.push(model.clone());
    }
    store.close();
    let wal = std::fs::read(dir.path().join("wal.log")).unwrap();
    let mut last = 0;
    for cut in 0..=wal.len() {
        let (img, _) = Store::recover_from_bytes(None, &wal[..cut]).unwrap();
        let got = Model::of(&img);
        let k = states
            .iter()
            .position(|s| *s == got)
            .unwrap_or_else(|| panic!("cut {cut}: not a committed prefix"));
        assert!(k + 1 >= last, "cut {cut}: recovered state went backwards");
        last = last.max(k + 1);
    }
    assert_eq!(last, states.len());
}

#[test]
fn concurrent_transfers_conserve_the_total() {
    let store = Store::in_memory_with(StoreConfig {
        lock_timeout: Duration::from_secs(5),
        ..config()
    });
    let accounts = 6u8;
    {
        let mut tx = store.begin().unwrap();
        for a in 0..accounts {
            tx.set("acct", &[a], 100u64.to_le_bytes().to_vec()).unwrap();
        }
        tx.commit().unwrap();
    }
    let store = Arc::new(store);
    let workers: Vec<_> = (0..4)
        .map(|w| {
            let store = store.clone();
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(w);
                let mut done = 0;
                while done < 200 {
                    let (a, b) = (rng.gen_range(0..accounts), rng.gen_range(0..accounts));
                    if a == b {
                        continue;
                    }
                    let read = |tx: &mut rsm_core::storage::Transaction, k: u8| -> Result<u64, StoreError> {
                        let v = tx.get("acct", &[k])?.unwrap();
                        Ok(u64::from_le_bytes(v.try_into().unwrap()))
                    };
                    let attempt = || -> Result<(), StoreError> {
                        let mut tx = store.begin()?;
                        let (x, y) = (read(&mut tx, a)?, read(&mut tx, b)?);
                        let amt = x.min(7);
                        tx.set("acct", &[a], (x - amt).to_le_bytes().to_vec())?;
                        tx.set("acct", &[b], (y + amt).to_le_bytes().to_vec())?;
                        tx.commit()
                    };
                    match attempt() {
                        Ok(()) => done += 1,
                        Err(StoreError::Conflict(_)) => {}
                        Err(e) => panic!("{e}"),
                    }
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    let img = store.image();
    let total: u64 = img
        .map("acct")
        .unwrap()
        .values()
        .map(|v| u64::from_le_bytes(v.clone().try_into().unwrap()))
        .sum();
    assert_eq!(total, 100 * u64::from(accounts));
    assert_eq!(store.stats().commits, 1 + 4 * 200);
}
