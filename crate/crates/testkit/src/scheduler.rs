//! Seeded choice of the next task.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::world::TaskId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Uniform choice among enabled tasks.
    Random,
    /// Cycles through tasks in id order; fair.
    RoundRobin,
    /// Probabilistic concurrency testing: random task priorities with
    /// `depth - 1` priority change points.
    Pct { depth: usize },
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Random => write!(f, "random"),
            Strategy::RoundRobin => write!(f, "round-robin"),
            Strategy::Pct { depth } => write!(f, "pct:{depth}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Strategy::Random),
            "round-robin" | "rr" => Ok(Strategy::RoundRobin),
            "pct" => Ok(Strategy::Pct { depth: 3 }),
            _ => match s.strip_prefix("pct:") {
                Some(d) => d
                    .parse()
                    .map(|depth| Strategy::Pct { depth })
                    .map_err(|e| format!("bad pct depth `{d}`: {e}")),
                None => Err(format!("unknown strategy `{s}`")),
            },
        }
    }
}

pub struct Scheduler {
    strategy: Strategy,
    rng: ChaCha8Rng,
    last: Option<TaskId>,
    priorities: BTreeMap<TaskId, u64>,
    change_points: Vec<usize>,
    lowest: u64,
    step: usize,
}

impl Scheduler {
    /// `horizon` bounds the steps over which PCT change points are spread.
    pub fn new(strategy: Strategy, seed: u64, horizon: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let change_points = match strategy {
            Strategy::Pct { depth } => {
                let mut v: Vec<usize> = (1..depth).map(|_| rng.gen_range(0..horizon.max(1))).collect();
                v.sort_unstable();
                v
            }
            _ => Vec::new(),
        };
        Scheduler {
            strategy,
            rng,
            last: None,
            priorities: BTreeMap::new(),
            change_points,
            lowest: 0,
            step: 0,
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Index into `tasks` (nonempty, sorted) of the task to run.
    pub fn pick(&mut self, tasks: &[TaskId]) -> usize {
        assert!(!tasks.is_empty(), "pick from no tasks");
        let i = match self.strategy {
            Strategy::Random => self.rng.gen_range(0..tasks.len()),
            Strategy::RoundRobin => match &self.last {
                Some(last) => tasks.iter().position(|t| t > last).unwrap_or(0),
                None => 0,
            },
            Strategy::Pct { .. } => self.pick_pct(tasks),
        };
        self.last = Some(tasks[i].clone());
        self.step += 1;
        i
    }

    fn pick_pct(&mut self, tasks: &[TaskId]) -> usize {
        for t in tasks {
            if !self.priorities.contains_key(t) {
                let p = self.rng.gen_range(1u64 << 32..u64::MAX);
                self.priorities.insert(t.clone(), p);
            }
        }
        let best = |s: &Self| {
            (0..tasks.len())
                .max_by_key(|&i| (s.priorities[&tasks[i]], std::cmp::Reverse(i)))
                .unwrap()
        };
        let mut i = best(self);
        while self.change_points.first() == Some(&self.step) {
            self.change_points.remove(0);
            self.lowest += 1;
            self.priorities.insert(tasks[i].clone(), self.lowest);
            i = best(self);
        }
        i
    }
}
