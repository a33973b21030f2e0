//! Mechanical checkers: local-state equivalence, non-interference of
//! volatile fields, and failure transparency of runs with resets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::global::{init_l, run_round_robin, Draws, GlobalConfig, GlobalRule, NotApplicable, ScheduleError};
use crate::local::{reduce, FieldMap, LocalConfig, Nondet, Stuck, Tape};
use crate::syntax::{ClassDef, Int, Program, Stmt};

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error("configuration does not belong to class `{0}`")]
    ClassMismatch(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("statement is not the handler of class `{0}`")]
    NotHandlerStart(String),
    #[error("machine {0} is not ready")]
    NotReady(Int),
    #[error("no termination within {0} steps")]
    StepBound(usize),
    #[error("run has the wrong shape at step {index}: {reason}")]
    Shape { index: usize, reason: &'static str },
    #[error(transparent)]
    Stuck(#[from] Stuck),
    #[error(transparent)]
    Rule(#[from] NotApplicable),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn persistent_of(class: &ClassDef, f: &FieldMap) -> FieldMap {
    f.iter()
        .filter(|(k, _)| class.is_persistent(k))
        .map(|(k, v)| (k.clone(), *v))
        .collect()
}

fn fits_class(class: &ClassDef, c: &LocalConfig) -> bool {
    c.fields.len() == class.persistent.len() + class.volatile.len()
        && c.fields.keys().all(|k| class.is_persistent(k) || class.is_volatile(k))
}

/// `a ≅ b`: equal in E, F_p, L, s and b; volatile fields are ignored.
pub fn check_local_equiv(class: &ClassDef, a: &LocalConfig, b: &LocalConfig) -> Result<bool, CheckError> {
    if !fits_class(class, a) || !fits_class(class, b) {
        return Err(CheckError::ClassMismatch(class.name.clone()));
    }
    Ok(a.events == b.events
        && persistent_of(class, &a.fields) == persistent_of(class, &b.fields)
        && a.locals == b.locals
        && a.stmt == b.stmt
        && a.busy == b.busy)
}

/// Wraps another source and records what it hands out.
pub struct Recorder<'a> {
    pub inner: &'a mut dyn Nondet,
    pub draws: Draws,
}

impl Nondet for Recorder<'_> {
    fn star(&mut self) -> Int {
        let v = self.inner.star();
        self.draws.stars.push(v);
        v
    }

    fn fresh(&mut self, class: &str) -> Int {
        let v = self.inner.fresh(class);
        self.draws.ids.push(v);
        v
    }
}

/// Seeded uniform stars in `0..domain` and counting ids.
#[derive(Clone, Debug)]
pub struct SeededNondet {
    rng: ChaCha8Rng,
    pub domain: Int,
    pub next_id: Int,
}

impl SeededNondet {
    pub fn new(seed: u64, domain: Int, next_id: Int) -> SeededNondet {
        SeededNondet {
            rng: ChaCha8Rng::seed_from_u64(seed),
            domain: domain.max(1),
            next_id,
        }
    }
}

impl Nondet for SeededNondet {
    fn star(&mut self) -> Int {
        self.rng.gen_range(0..self.domain)
    }

    fn fresh(&mut self, _class: &str) -> Int {
        self.next_id += 1;
        self.next_id - 1
    }
}

#[derive(Clone, Debug)]
pub struct NiOptions {
    /// Values tried for each volatile field.
    pub domain: Vec<Int>,
    /// Above this many combinations, perturbations are sampled.
    pub max_perturbations: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for NiOptions {
    fn default() -> Self {
        NiOptions {
            domain: vec![-1, 0, 1, 2],
            max_perturbations: 256,
            max_steps: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NiCounterexample {
    /// Volatile field values of the perturbed start.
    pub perturbation: FieldMap,
    /// First step after which the two runs are not equivalent.
    pub divergence: usize,
    pub original: LocalConfig,
    pub perturbed: LocalConfig,
}

impl fmt::Display for NiCounterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "volatile fields {:?}: runs diverge after step {}\n  original:  {}\n  perturbed: {}",
            self.perturbation, self.divergence, self.original, self.perturbed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NiVerdict {
    Pass { perturbations: usize, steps: usize },
    Counterexample(NiCounterexample),
}

impl NiVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, NiVerdict::Pass { .. })
    }
}

fn run_to_skip(c: &LocalConfig, nd: &mut dyn Nondet, max_steps: usize) -> Result<Vec<LocalConfig>, CheckError> {
    let mut trajectory = vec![c.clone()];
    let mut cur = c.clone();
    while cur.stmt != Stmt::Skip {
        if trajectory.len() > max_steps {
            return Err(CheckError::StepBound(max_steps));
        }
        reduce(&mut cur, nd)?;
        trajectory.push(cur.clone());
    }
    Ok(trajectory)
}

fn perturbations(class: &ClassDef, opts: &NiOptions) -> Vec<FieldMap> {
    let names: Vec<&String> = class.volatile.keys().collect();
    let d = opts.domain.len().max(1);
    let total = (d as u128).checked_pow(names.len() as u32).unwrap_or(u128::MAX);
    let assign = |mut k: u128| -> FieldMap {
        names
            .iter()
            .map(|n| {
                let v = opts.domain.get((k % d as u128) as usize).copied().unwrap_or(0);
                k /= d as u128;
                ((*n).clone(), v)
            })
            .collect()
    };
    if opts.domain.is_empty() {
        return vec![FieldMap::new()];
    }
    if total <= opts.max_perturbations as u128 {
        (0..total).map(assign).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        (0..opts.max_perturbations).map(|_| assign(rng.gen_range(0..total))).collect()
    }
}

/// Runs `start` (whose statement must be the class handler) to
/// termination, then re-runs every volatile perturbation of it with the
/// recorded choices replayed and checks the terminal configurations are
/// equivalent.
pub fn check_non_interference(
    prog: &Program,
    class: &str,
    start: &LocalConfig,
    nd: &mut dyn Nondet,
    opts: &NiOptions,
) -> Result<NiVerdict, CheckError> {
    let c = prog.class(class).ok_or_else(|| CheckError::UnknownClass(class.into()))?;
    if start.stmt != c.handler {
        return Err(CheckError::NotHandlerStart(class.into()));
    }
    if !fits_class(c, start) {
        return Err(CheckError::ClassMismatch(class.into()));
    }
    let mut rec = Recorder {
        inner: nd,
        draws: Draws::default(),
    };
    let base = run_to_skip(start, &mut rec, opts.max_steps)?;
    let draws = rec.draws;
    let perts = perturbations(c, opts);
    for p in &perts {
        let mut s = start.clone();
        s.fields.extend(p.iter().map(|(k, v)| (k.clone(), *v)));
        let mut tape = Tape::new(draws.stars.clone(), draws.ids.clone());
        let run = run_to_skip(&s, &mut tape, opts.max_steps)?;
        let last = run.last().expect("non-empty");
        if !check_local_equiv(c, base.last().expect("non-empty"), last)? {
            let divergence = (0..run.len().max(base.len()))
                .find(|&i| match (base.get(i), run.get(i)) {
                    (Some(a), Some(b)) => !check_local_equiv(c, a, b).unwrap_or(false),
                    _ => true,
                })
                .unwrap_or(0);
            let pick = |v: &Vec<LocalConfig>| v.get(divergence).unwrap_or_else(|| v.last().unwrap()).clone();
            return Ok(NiVerdict::Counterexample(NiCounterexample {
                perturbation: p.clone(),
                divergence,
                original: pick(&base),
                perturbed: pick(&run),
            }));
        }
    }
    Ok(NiVerdict::Pass {
        perturbations: perts.len(),
        steps: base.len() - 1,
    })
}

/// Non-interference of a class handler over a grid of incoming events
/// `(x_s, x_e, x_p)` with persistent fields sampled from `opts.domain`.
pub fn check_class_non_interference(
    prog: &Program,
    class: &str,
    events: &[(Int, Int, Int)],
    opts: &NiOptions,
) -> Result<NiVerdict, CheckError> {
    let c = prog.class(class).ok_or_else(|| CheckError::UnknownClass(class.into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut total = 0;
    let mut steps = 0;
    for (i, &(s, e, p)) in events.iter().enumerate() {
        let mut fields = crate::global::reset_f(c, &c.persistent);
        if i > 0 && !opts.domain.is_empty() {
            for k in c.persistent.keys() {
                fields.insert(k.clone(), opts.domain[rng.gen_range(0..opts.domain.len())]);
            }
        }
        let start = LocalConfig {
            events: Vec::new(),
            fields,
            locals: init_l(c, s, e, p),
            stmt: c.handler.clone(),
            busy: true,
        };
        let mut nd = SeededNondet::new(opts.seed ^ i as u64, 3, 1000);
        match check_non_interference(prog, class, &start, &mut nd, opts)? {
            NiVerdict::Pass { perturbations, steps: n } => {
                total += perturbations;
                steps = steps.max(n);
            }
            v => return Ok(v),
        }
    }
    Ok(NiVerdict::Pass {
        perturbations: total,
        steps,
    })
}

/// A crash run that the reset-free run does not match.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub machine: Int,
    pub run: Vec<GlobalRule>,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let run: Vec<&str> = self.run.iter().map(|r| r.name()).collect();
        write!(f, "machine {}: {} (run: {})", self.machine, self.reason, run.join(" "))
    }
}

/// The reset-free run from `g0` with `draws` replayed for `r`: the
/// configuration right after G-commit and after each following
/// create/send step.
fn reference_run(prog: &Program, g0: &GlobalConfig, r: Int, draws: &Draws, max_steps: usize) -> Result<Vec<GlobalConfig>, CheckError> {
    let mut g = g0.clone();
    g.oracle.set_replay(r, draws);
    g.apply(prog, GlobalRule::Start, r)?;
    let mut n = 0;
    while g.m[&r].stmt != Stmt::Skip {
        n += 1;
        if n > max_steps {
            return Err(CheckError::StepBound(max_steps));
        }
        g.apply(prog, GlobalRule::Local, r)?;
    }
    g.apply(prog, GlobalRule::Commit, r)?;
    g.oracle.replay.remove(&r);
    let mut out = vec![g.clone()];
    while let Some(&rule) = g.enabled(prog, r).iter().find(|x| matches!(x, GlobalRule::Create | GlobalRule::Send)) {
        g.apply(prog, rule, r)?;
        out.push(g.clone());
    }
    Ok(out)
}

fn compare(
    prog: &Program,
    r: Int,
    faulty: &GlobalConfig,
    reference: Option<&GlobalConfig>,
    post_commit_reset: bool,
) -> Result<(), String> {
    let Some(reference) = reference else {
        return Err("reset-free run takes fewer create/send steps".into());
    };
    for (id, rec) in &faulty.pi {
        match reference.pi.get(id) {
            Some(other) if other.trace != rec.trace => return Err(format!("trace of machine {id} differs")),
            Some(other) if other != rec => return Err(format!("persistent record of machine {id} differs")),
            Some(_) => {}
            None => return Err(format!("machine {id} missing from reset-free run")),
        }
    }
    if faulty.pi.len() != reference.pi.len() {
        return Err("reset-free run has extra machines".into());
    }
    if faulty.env_out != reference.env_out {
        return Err("events sent to the environment differ".into());
    }
    let class = &prog.classes[&faulty.pi[&r].class];
    let (a, b) = (&faulty.m[&r], &reference.m[&r]);
    let mut b = b.clone();
    if post_commit_reset {
        // G-commit keeps L, G-reset clears it
        b.locals = a.locals.clone();
    }
    if !check_local_equiv(class, a, &b).map_err(|e| e.to_string())? {
        return Err(format!("local state of machine {r} not equivalent"));
    }
    for (id, m) in &faulty.m {
        if *id != r && reference.m.get(id) != Some(m) {
            return Err(format!("local state of machine {id} differs"));
        }
    }
    Ok(())
}

/// Checks one crash run of machine `r` starting at `g0`:
/// (G-start | G-local | G-reset)*, one G-commit, then
/// (G-create | G-send | G-reset)*.
pub fn check_failure_transparency(
    prog: &Program,
    g0: &GlobalConfig,
    r: Int,
    run: &[GlobalRule],
    max_steps: usize,
) -> Result<Result<(), Violation>, CheckError> {
    if !g0.ready(prog, r) {
        return Err(CheckError::NotReady(r));
    }
    let mut g = g0.clone();
    let mut committed = false;
    let mut moves = 0;
    let mut post_reset = false;
    for (index, &rule) in run.iter().enumerate() {
        let ok = match rule {
            GlobalRule::Start | GlobalRule::Local => !committed,
            GlobalRule::Commit => !committed,
            GlobalRule::Create | GlobalRule::Send => committed,
            GlobalRule::Reset => true,
        };
        if !ok {
            return Err(CheckError::Shape {
                index,
                reason: "rule not allowed in this phase",
            });
        }
        g.apply(prog, rule, r).map_err(|source| ScheduleError::Step {
            index,
            rule,
            machine: r,
            source,
        })?;
        match rule {
            GlobalRule::Commit => committed = true,
            GlobalRule::Create | GlobalRule::Send => moves += 1,
            GlobalRule::Reset if committed => post_reset = true,
            _ => {}
        }
    }
    if !committed {
        return Err(CheckError::Shape {
            index: run.len(),
            reason: "run has no G-commit",
        });
    }
    let draws = g.oracle.committed.get(&r).cloned().unwrap_or_default();
    let reference = reference_run(prog, g0, r, &draws, max_steps)?;
    Ok(compare(prog, r, &g, reference.get(moves), post_reset).map_err(|reason| Violation {
        machine: r,
        run: run.to_vec(),
        reason,
    }))
}

#[derive(Clone, Debug)]
pub struct TransparencyOptions {
    /// Most G-reset steps placed in one run.
    pub max_resets: usize,
    /// Bound on steps of one run.
    pub max_steps: usize,
    /// Handler invocations checked per program.
    pub max_handlers: usize,
}

impl Default for TransparencyOptions {
    fn default() -> Self {
        TransparencyOptions {
            max_resets: 4,
            max_steps: 1_000,
            max_handlers: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransparencyReport {
    /// Handler invocations whose reset placements were enumerated.
    pub handlers: usize,
    /// Runs with resets compared against the reset-free run.
    pub runs: usize,
    pub violations: Vec<Violation>,
}

impl TransparencyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn merge(&mut self, other: TransparencyReport) {
        self.handlers += other.handlers;
        self.runs += other.runs;
        self.violations.extend(other.violations);
    }
}

struct Enumerator<'a> {
    prog: &'a Program,
    g0: &'a GlobalConfig,
    r: Int,
    opts: &'a TransparencyOptions,
    references: HashMap<Draws, Vec<GlobalConfig>>,
    report: TransparencyReport,
}

struct Node {
    g: GlobalConfig,
    resets: usize,
    last_reset: bool,
    committed: bool,
    moves: usize,
    post_reset: bool,
}

impl Enumerator<'_> {
    fn next_rule(&self, n: &Node) -> Option<GlobalRule> {
        let m = &n.g.m[&self.r];
        if !n.committed {
            return Some(match (m.busy, m.stmt == Stmt::Skip) {
                (false, _) => GlobalRule::Start,
                (true, false) => GlobalRule::Local,
                (true, true) => GlobalRule::Commit,
            });
        }
        n.g.enabled(self.prog, self.r)
            .into_iter()
            .find(|x| matches!(x, GlobalRule::Create | GlobalRule::Send))
    }

    fn visit(&mut self, n: Node, path: &mut Vec<GlobalRule>) -> Result<(), CheckError> {
        if path.len() > self.opts.max_steps {
            return Err(CheckError::StepBound(self.opts.max_steps));
        }
        if n.committed {
            self.report.runs += 1;
            let draws = n.g.oracle.committed.get(&self.r).cloned().unwrap_or_default();
            if !self.references.contains_key(&draws) {
                let run = reference_run(self.prog, self.g0, self.r, &draws, self.opts.max_steps)?;
                self.references.insert(draws.clone(), run);
            }
            let reference = self.references[&draws].get(n.moves);
            if let Err(reason) = compare(self.prog, self.r, &n.g, reference, n.post_reset) {
                self.report.violations.push(Violation {
                    machine: self.r,
                    run: path.clone(),
                    reason,
                });
                return Ok(());
            }
        }
        if n.resets < self.opts.max_resets && !n.last_reset {
            let mut g = n.g.clone();
            g.apply(self.prog, GlobalRule::Reset, self.r)?;
            path.push(GlobalRule::Reset);
            self.visit(
                Node {
                    g,
                    resets: n.resets + 1,
                    last_reset: true,
                    post_reset: n.post_reset || n.committed,
                    ..n
                },
                path,
            )?;
            path.pop();
            if !self.report.violations.is_empty() {
                return Ok(());
            }
        }
        if let Some(rule) = self.next_rule(&n) {
            let mut g = n.g;
            g.apply(self.prog, rule, self.r)?;
            path.push(rule);
            self.visit(
                Node {
                    g,
                    resets: n.resets,
                    last_reset: false,
                    committed: n.committed || rule == GlobalRule::Commit,
                    moves: n.moves + matches!(rule, GlobalRule::Create | GlobalRule::Send) as usize,
                    post_reset: n.post_reset,
                },
                path,
            )?;
            path.pop();
        }
        Ok(())
    }
}

/// Enumerates every placement of up to `opts.max_resets` G-reset steps
/// (never two in a row) into the processing of `r`'s next inbox event,
/// checking each prefix that has committed against the reset-free run.
pub fn check_reset_placements(
    prog: &Program,
    g0: &GlobalConfig,
    r: Int,
    opts: &TransparencyOptions,
) -> Result<TransparencyReport, CheckError> {
    if !g0.ready(prog, r) {
        return Err(CheckError::NotReady(r));
    }
    let mut e = Enumerator {
        prog,
        g0,
        r,
        opts,
        references: HashMap::new(),
        report: TransparencyReport {
            handlers: 1,
            ..Default::default()
        },
    };
    let root = Node {
        g: g0.clone(),
        resets: 0,
        last_reset: false,
        committed: false,
        moves: 0,
        post_reset: false,
    };
    e.visit(root, &mut Vec::new())?;
    Ok(e.report)
}

/// Drives `prog` reset-free, machine by machine in id order, and before
/// every handler invocation enumerates reset placements for it.
pub fn check_program_transparency(
    prog: &Program,
    seed: u64,
    star_domain: Int,
    opts: &TransparencyOptions,
) -> Result<TransparencyReport, CheckError> {
    let mut g = GlobalConfig::initial(prog, seed, star_domain);
    let mut report = TransparencyReport::default();
    while report.handlers < opts.max_handlers {
        let ready: Vec<Int> = g.m.keys().copied().filter(|r| g.ready(prog, *r)).collect();
        let Some(&r) = ready.first() else { break };
        report.merge(check_reset_placements(prog, &g, r, opts)?);
        if !report.passed() {
            break;
        }
        crate::global::run_handler(prog, &mut g, r, opts.max_steps)?;
        // deliver leftovers of every machine before the next handler
        run_round_robin(prog, &mut g, 0, opts.max_steps)?;
    }
    Ok(report)
}

/// Per-machine ghost traces of a reset-free round-robin run.
pub fn reset_free_traces(
    prog: &Program,
    seed: u64,
    star_domain: Int,
    max_handlers: usize,
) -> Result<BTreeMap<Int, Vec<crate::syntax::Ev>>, CheckError> {
    let mut g = GlobalConfig::initial(prog, seed, star_domain);
    run_round_robin(prog, &mut g, max_handlers, 10_000)?;
    Ok(g.traces())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_program;

    const PROG: &str = "(program
        (class A
          (persistent (n 0))
          (volatile (v 0))
          (locals (t 0))
          (handler (seq (:= t (load n)) (:= t (+ t x_p)) (store n t) (set v (+ v 1))
                        (send x_s 1 t) (send x_s 2 x_p) (send x_s 3 t))))
        (machines (1 A))
        (events (1 0 4) (1 0 5)))";

    #[test]
    fn equivalence_ignores_volatile_fields_only() {
        let p = parse_program(PROG).unwrap();
        let c = &p.classes["A"];
        let a = LocalConfig::at_rest(FieldMap::from([("n".into(), 1), ("v".into(), 2)]));
        let mut b = a.clone();
        assert!(check_local_equiv(c, &a, &b).unwrap());
        b.fields.insert("v".into(), 9);
        assert!(check_local_equiv(c, &a, &b).unwrap());
        b.fields.insert("n".into(), 9);
        assert!(!check_local_equiv(c, &a, &b).unwrap());
        b.fields.insert("w".into(), 0);
        assert!(matches!(check_local_equiv(c, &a, &b), Err(CheckError::ClassMismatch(_))));
    }

    #[test]
    fn counter_handler_is_non_interfering() {
        let p = parse_program(PROG).unwrap();
        let v = check_class_non_interference(&p, "A", &[(0, 0, 1), (1, 2, 3)], &NiOptions::default()).unwrap();
        assert!(v.passed(), "{v:?}");
    }

    #[test]
    fn copying_a_volatile_field_into_a_send_is_caught() {
        let p = parse_program(
            "(program (class B (persistent) (volatile (v 0)) (locals (t 0))
               (handler (seq (:= t v) (send x_s 1 t)))) (machines (1 B)) (events))",
        )
        .unwrap();
        let opts = NiOptions {
            domain: vec![0, 1],
            ..NiOptions::default()
        };
        match check_class_non_interference(&p, "B", &[(0, 0, 0)], &opts).unwrap() {
            NiVerdict::Counterexample(c) => {
                assert_eq!(c.perturbation["v"], 1);
                assert_eq!(c.divergence, 1);
            }
            v => panic!("expected a counterexample, got {v:?}"),
        }
    }

    #[test]
    fn reset_free_run_is_transparent_to_itself() {
        let p = parse_program(PROG).unwrap();
        let g0 = GlobalConfig::initial(&p, 1, 3);
        let mut g = g0.clone();
        let steps = crate::global::run_handler(&p, &mut g, 1, 100).unwrap();
        assert_eq!(check_failure_transparency(&p, &g0, 1, &steps, 100).unwrap(), Ok(()));
    }

    #[test]
    fn shape_errors_name_the_step() {
        let p = parse_program(PROG).unwrap();
        let g0 = GlobalConfig::initial(&p, 1, 3);
        let bad = [GlobalRule::Start, GlobalRule::Send];
        assert!(matches!(
            check_failure_transparency(&p, &g0, 1, &bad, 100),
            Err(CheckError::Shape { index: 1, .. })
        ));
    }

    #[test]
    fn every_reset_placement_matches() {
        let p = parse_program(PROG).unwrap();
        let g0 = GlobalConfig::initial(&p, 1, 3);
        let r = check_reset_placements(&p, &g0, 1, &TransparencyOptions::default()).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
        assert!(r.runs > 100);
    }
}
