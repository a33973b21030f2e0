//! Repeated seeded runs of a program against its monitors.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsm_core::model::Registry;
use serde::Serialize;

use crate::monitor::{Monitor, MonitorFactory, MonitorKind, Observation};
use crate::scheduler::{Scheduler, Strategy};
use crate::world::{CrashPolicy, World};
use crate::TestError;

/// Trace entries kept per iteration for reports.
const TRACE_TAIL: usize = 64;

pub trait TestProgram: Send + Sync {
    fn name(&self) -> &str;
    fn registry(&self) -> Arc<Registry>;
    /// Creates the initial machines and inputs.
    fn setup(&self, world: &mut World) -> Result<(), TestError>;
    fn monitors(&self) -> Vec<MonitorFactory> {
        Vec::new()
    }
}

#[derive(Clone, Debug)]
pub struct ExploreConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Scheduling steps per iteration.
    pub max_steps: usize,
    pub strategy: Strategy,
    pub crashes: CrashPolicy,
    /// Hot liveness monitors get `horizon_factor * max_steps` further fair
    /// steps before they count as violated.
    pub horizon_factor: usize,
    pub stop_on_first: bool,
    /// Compare the persistent writes of a commit that crashed with those of
    /// its retry.
    pub check_writes: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            iterations: 100,
            seed: 0,
            max_steps: 10_000,
            strategy: Strategy::Random,
            crashes: CrashPolicy::Never,
            horizon_factor: 10,
            stop_on_first: true,
            check_writes: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViolationReport {
    pub iteration: usize,
    pub iteration_seed: u64,
    pub monitor: String,
    pub kind: MonitorKind,
    pub message: String,
    pub steps: usize,
    /// The last steps before the violation.
    pub trace: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterationResult {
    pub steps: usize,
    pub crashes: usize,
    pub quiescent: bool,
    pub violation: Option<ViolationReport>,
    /// Handled events per `class/event_type`.
    pub coverage: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub program: String,
    pub strategy: String,
    pub seed: u64,
    pub iterations: usize,
    pub total_steps: usize,
    pub crashes: usize,
    pub elapsed_ms: u128,
    pub coverage: BTreeMap<String, u64>,
    pub violations: Vec<ViolationReport>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Seeds of the iterations of a run, in order.
pub fn iteration_seeds(seed: u64) -> impl Iterator<Item = u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::from_fn(move || Some(rng.next_u64()))
}

pub fn explore(program: &dyn TestProgram, monitors: &[MonitorFactory], cfg: &ExploreConfig) -> Result<Report, TestError> {
    let start = Instant::now();
    let mut report = Report {
        program: program.name().to_owned(),
        strategy: cfg.strategy.to_string(),
        seed: cfg.seed,
        iterations: 0,
        total_steps: 0,
        crashes: 0,
        elapsed_ms: 0,
        coverage: BTreeMap::new(),
        violations: Vec::new(),
    };
    for (i, s) in iteration_seeds(cfg.seed).take(cfg.iterations).enumerate() {
        let mut r = replay(program, monitors, cfg, s)?;
        report.iterations += 1;
        report.total_steps += r.steps;
        report.crashes += r.crashes;
        for (k, v) in r.coverage {
            *report.coverage.entry(k).or_default() += v;
        }
        if let Some(mut v) = r.violation.take() {
            v.iteration = i;
            report.violations.push(v);
            if cfg.stop_on_first {
                break;
            }
        }
    }
    report.elapsed_ms = start.elapsed().as_millis();
    Ok(report)
}

struct Run {
    world: World,
    monitors: Vec<Box<dyn Monitor>>,
    trace: VecDeque<String>,
    result: IterationResult,
    seed: u64,
    check_writes: bool,
}

impl Run {
    fn violation(&self, monitor: &str, kind: MonitorKind, message: String) -> ViolationReport {
        ViolationReport {
            iteration: 0,
            iteration_seed: self.seed,
            monitor: monitor.to_owned(),
            kind,
            message,
            steps: self.result.steps,
            trace: self.trace.iter().cloned().collect(),
        }
    }

    /// Runs one task; returns a violation if one was found.
    fn step(&mut self, scheduler: &mut Scheduler) -> Result<Option<ViolationReport>, TestError> {
        let tasks = self.world.tasks();
        if tasks.is_empty() {
            self.result.quiescent = true;
            return Ok(None);
        }
        self.result.quiescent = false;
        let task = &tasks[scheduler.pick(&tasks)];
        let obs = self.world.run_task(task)?;
        self.result.steps += 1;
        if self.trace.len() == TRACE_TAIL {
            self.trace.pop_front();
        }
        self.trace.push_back(format!("{}: {task}", self.result.steps));
        for o in &obs {
            match o {
                Observation::Crash(id) => {
                    self.result.crashes += 1;
                    self.trace.push_back(format!("  crash at commit of {id}"));
                }
                Observation::Handled { machine, event } => {
                    let class = self.world.host().class_of(machine).unwrap_or_default();
                    *self.result.coverage.entry(format!("{class}/{}", event.event_type)).or_default() += 1;
                }
                _ => {}
            }
            for m in &mut self.monitors {
                if let Err(msg) = m.observe(o, self.world.host()) {
                    let (name, kind) = (m.name().to_owned(), m.kind());
                    return Ok(Some(self.violation(&name, kind, msg)));
                }
            }
        }
        let mismatches = self.world.take_mismatches();
        if let Some(msg) = mismatches.into_iter().next().filter(|_| self.check_writes) {
            return Ok(Some(self.violation("non-interference", MonitorKind::Safety, msg)));
        }
        Ok(None)
    }

    fn hot(&self) -> Option<(String, MonitorKind)> {
        self.monitors.iter().find(|m| m.is_hot()).map(|m| (m.name().to_owned(), m.kind()))
    }
}

/// Runs the iteration with the given seed; the same seed reproduces the
/// same schedule, crashes and random draws.
pub fn replay(
    program: &dyn TestProgram,
    monitors: &[MonitorFactory],
    cfg: &ExploreConfig,
    iteration_seed: u64,
) -> Result<IterationResult, TestError> {
    let mut world = World::new(program.registry(), iteration_seed, cfg.crashes)?;
    program.setup(&mut world)?;
    let mut run = Run {
        world,
        monitors: monitors.iter().map(|f| f()).collect(),
        trace: VecDeque::new(),
        result: IterationResult::default(),
        seed: iteration_seed,
        check_writes: cfg.check_writes,
    };
    let mut scheduler = Scheduler::new(cfg.strategy, iteration_seed, cfg.max_steps);
    for _ in 0..cfg.max_steps {
        if let Some(v) = run.step(&mut scheduler)? {
            run.result.violation = Some(v);
            return Ok(run.result);
        }
        if run.result.quiescent {
            break;
        }
    }
    if run.hot().is_some() {
        let mut fair = Scheduler::new(Strategy::RoundRobin, iteration_seed, 1);
        for _ in 0..cfg.horizon_factor.saturating_mul(cfg.max_steps) {
            if run.hot().is_none() {
                break;
            }
            if let Some(v) = run.step(&mut fair)? {
                run.result.violation = Some(v);
                return Ok(run.result);
            }
            if run.result.quiescent {
                break;
            }
        }
        if let Some((name, kind)) = run.hot() {
            let why = if run.result.quiescent { "the program went quiet" } else { "the step bound" };
            let msg = format!("still hot after {} steps; {why}", run.result.steps);
            run.result.violation = Some(run.violation(&name, kind, msg));
        }
    }
    Ok(run.result)
}
