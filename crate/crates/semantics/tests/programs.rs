use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsm_semantics::check::{
    check_class_non_interference, check_failure_transparency, check_program_transparency, check_reset_placements,
    NiOptions, NiVerdict, TransparencyOptions,
};
use rsm_semantics::gen::{program, GenOptions};
use rsm_semantics::global::{run_handler, run_round_robin, run_schedule};
use rsm_semantics::{parse_program, GlobalConfig, GlobalRule, Int, Program};

const WORDCOUNT: &str = include_str!("../programs/wordcount.rsm");
const SPAWN: &str = include_str!("../programs/spawn.rsm");
const LEAK: &str = include_str!("../programs/leak.rsm");

fn with_words(prog: &Program, words: &[Int]) -> Program {
    let mut p = prog.clone();
    p.events = words.iter().map(|w| (1, 0, *w)).collect();
    p
}

/// Random scheduler over all machines. With `resets`, G-reset is offered
/// at every step until the budget is spent. Returns the schedule.
fn random_run(prog: &Program, g: &mut GlobalConfig, seed: u64, mut resets: usize) -> Vec<(GlobalRule, Int)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut schedule = Vec::new();
    for _ in 0..100_000 {
        let mut moves: Vec<(GlobalRule, Int)> = Vec::new();
        for r in g.m.keys() {
            moves.extend(g.enabled(prog, *r).into_iter().map(|rule| (rule, *r)));
        }
        if moves.is_empty() {
            return schedule;
        }
        let ids: Vec<Int> = g.m.keys().copied().collect();
        let mv = if resets > 0 && rng.gen_bool(0.05) {
            resets -= 1;
            (GlobalRule::Reset, ids[rng.gen_range(0..ids.len())])
        } else {
            moves[rng.gen_range(0..moves.len())]
        };
        g.apply(prog, mv.0, mv.1).unwrap();
        schedule.push(mv);
    }
    panic!("run did not quiesce");
}

fn max_word(words: &[Int]) -> (Int, BTreeMap<Int, Int>) {
    let mut freq = BTreeMap::new();
    for w in words {
        *freq.entry(*w).or_insert(0) += 1;
    }
    (freq.values().copied().max().unwrap_or(0), freq)
}

#[test]
fn example_programs_parse_and_print_back() {
    for text in [WORDCOUNT, SPAWN, LEAK] {
        let p = parse_program(text).unwrap();
        assert_eq!(parse_program(&p.to_string()).unwrap(), p);
    }
}

#[test]
fn wordcount_reports_the_most_frequent_word() {
    let p = parse_program(WORDCOUNT).unwrap();
    let mut g = GlobalConfig::initial(&p, 0, 3);
    run_round_robin(&p, &mut g, usize::MAX, 1000).unwrap();
    let (_, last) = *g.env_out.last().unwrap();
    assert_eq!((last.p / 10, last.p % 10), (2, 0));
    assert_eq!(g.traces()[&4].last(), Some(&last));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wordcount_matches_a_sequential_count(words in prop::collection::vec(0..3i64, 1..14), seed in any::<u64>(), resets in 0..6usize) {
        let p = with_words(&parse_program(WORDCOUNT).unwrap(), &words);
        let mut g = GlobalConfig::initial(&p, seed, 3);
        random_run(&p, &mut g, seed, resets);
        let (best, freq) = max_word(&words);
        let (_, last) = *g.env_out.last().unwrap();
        prop_assert_eq!(last.p / 10, best);
        prop_assert_eq!(freq[&(last.p % 10)], best);
        prop_assert_eq!(g.pi[&4].persistent["high"], best);
    }

    #[test]
    fn swapping_local_steps_of_different_machines_keeps_traces(words in prop::collection::vec(0..3i64, 1..10), seed in any::<u64>()) {
        let p = with_words(&parse_program(WORDCOUNT).unwrap(), &words);
        let g0 = GlobalConfig::initial(&p, seed, 3);
        let mut g = g0.clone();
        let mut schedule = random_run(&p, &mut g, seed, 0);
        let swappable: Vec<usize> = (1..schedule.len())
            .filter(|&i| {
                let (a, b) = (schedule[i - 1], schedule[i]);
                a.0 == GlobalRule::Local && b.0 == GlobalRule::Local && a.1 != b.1
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            if swappable.is_empty() {
                break;
            }
            let i = swappable[rng.gen_range(0..swappable.len())];
            if schedule[i - 1].0 == GlobalRule::Local && schedule[i].0 == GlobalRule::Local && schedule[i - 1].1 != schedule[i].1 {
                schedule.swap(i - 1, i);
            }
        }
        let other = run_schedule(&p, &g0, &schedule).unwrap();
        prop_assert_eq!(other.traces(), g.traces());
        prop_assert_eq!(other.pi, g.pi);
    }

    #[test]
    fn traces_only_grow_by_create_and_send_and_reset_keeps_pi(seed in any::<u64>()) {
        let p = program(seed, &GenOptions::default());
        let mut g = GlobalConfig::initial(&p, seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..300 {
            let ids: Vec<Int> = g.m.keys().copied().collect();
            let r = ids[rng.gen_range(0..ids.len())];
            let mut rules = g.enabled(&p, r);
            rules.push(GlobalRule::Reset);
            let rule = rules[rng.gen_range(0..rules.len())];
            let before = g.clone();
            g.apply(&p, rule, r).unwrap();
            for (id, rec) in &g.pi {
                let old = before.pi.get(id).map(|x| x.trace.clone()).unwrap_or_default();
                let grew = matches!(rule, GlobalRule::Create | GlobalRule::Send) && *id == r;
                prop_assert_eq!(rec.trace.len(), old.len() + grew as usize);
                prop_assert_eq!(&rec.trace[rec.trace.len() - old.len()..], &old[..]);
            }
            if rule == GlobalRule::Reset {
                prop_assert_eq!(&g.pi, &before.pi);
            }
        }
    }
}

#[test]
fn count_handler_is_non_interfering_and_leak_is_not() {
    let events = [(1, 1, 0), (1, 1, 1), (1, 1, 2)];
    let wc = parse_program(WORDCOUNT).unwrap();
    for class in ["Main", "Count", "Max"] {
        assert!(check_class_non_interference(&wc, class, &events, &NiOptions::default()).unwrap().passed());
    }
    let leak = parse_program(LEAK).unwrap();
    let opts = NiOptions {
        domain: vec![0, 1],
        ..NiOptions::default()
    };
    let NiVerdict::Counterexample(c) = check_class_non_interference(&leak, "Leak", &events, &opts).unwrap() else {
        panic!("leak not detected");
    };
    assert_eq!(c.divergence, 3);
}

#[test]
fn resets_after_commit_resume_sends_with_the_same_trace() {
    let p = parse_program(SPAWN).unwrap();
    let g0 = GlobalConfig::initial(&p, 5, 3);
    let mut g = g0.clone();
    let base = run_handler(&p, &mut g, 1, 1000).unwrap();
    let commit = base.iter().position(|r| *r == GlobalRule::Commit).unwrap();
    assert_eq!(base.len() - commit - 1, 3, "create plus two sends");
    for at in commit + 1..=base.len() {
        let mut run = base.clone();
        run.insert(at, GlobalRule::Reset);
        assert_eq!(check_failure_transparency(&p, &g0, 1, &run, 1000).unwrap(), Ok(()), "reset at {at}");
    }
}

#[test]
fn reset_placements_in_the_example_programs_are_transparent() {
    let opts = TransparencyOptions {
        max_resets: 2,
        ..TransparencyOptions::default()
    };
    for text in [WORDCOUNT, SPAWN] {
        let p = parse_program(text).unwrap();
        let r = check_program_transparency(&p, 3, 3, &opts).unwrap();
        assert!(r.passed(), "{}", r.violations[0]);
        assert!(r.handlers > 1);
    }
}

#[test]
fn leaking_volatile_state_breaks_transparency() {
    let p = parse_program(LEAK).unwrap();
    let r = check_program_transparency(&p, 0, 3, &TransparencyOptions::default()).unwrap();
    assert!(!r.passed());
    assert!(r.violations[0].reason.contains("machine 1"), "{}", r.violations[0]);
}

#[test]
fn generated_programs_are_failure_transparent() {
    let opts = TransparencyOptions {
        max_resets: 2,
        ..TransparencyOptions::default()
    };
    for seed in 0..10 {
        let p = program(seed, &GenOptions::default());
        let r = check_program_transparency(&p, seed, 3, &opts).unwrap();
        assert!(r.passed(), "seed {seed}: {}\n{p}", r.violations[0]);
    }
}

#[test]
fn non_ready_machine_is_rejected() {
    let p = parse_program(LEAK).unwrap();
    let mut g = GlobalConfig::initial(&p, 0, 3);
    g.apply(&p, GlobalRule::Start, 1).unwrap();
    assert!(check_reset_placements(&p, &g, 1, &TransparencyOptions::default()).is_err());
}
