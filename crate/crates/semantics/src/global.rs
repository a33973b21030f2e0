//! Global judgment `S ⊢ M; Π ⟶ M1; Π1` over all machines, with ghost
//! traces.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::local::{reduce, FieldMap, LocalConfig, LocalEnv, LocalStep, Nondet, Stuck};
use crate::syntax::{ClassDef, Ev, Int, Program, Stmt, ENV, N_CREATE, X_E, X_P, X_S};

/// Persistent record `C; I; O; P; T`. Lists keep the newest event at
/// index 0; the oldest (the one the rules take next) is last.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Record {
    pub class: String,
    pub inbox: Vec<Ev>,
    pub outbox: Vec<Ev>,
    pub persistent: FieldMap,
    pub trace: Vec<Ev>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GlobalRule {
    Start,
    Local,
    Commit,
    Create,
    Send,
    Reset,
}

impl GlobalRule {
    pub const ALL: [GlobalRule; 6] = [
        GlobalRule::Start,
        GlobalRule::Local,
        GlobalRule::Commit,
        GlobalRule::Create,
        GlobalRule::Send,
        GlobalRule::Reset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GlobalRule::Start => "start",
            GlobalRule::Local => "local",
            GlobalRule::Commit => "commit",
            GlobalRule::Create => "create",
            GlobalRule::Send => "send",
            GlobalRule::Reset => "reset",
        }
    }

    pub fn parse(s: &str) -> Option<GlobalRule> {
        let s = s.trim().to_ascii_lowercase();
        let s = s.strip_prefix("g-").unwrap_or(&s);
        GlobalRule::ALL.into_iter().find(|r| r.name() == s)
    }
}

impl fmt::Display for GlobalRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum NotApplicable {
    #[error("no machine {0}")]
    UnknownMachine(Int),
    #[error("G-{rule} not applicable to machine {machine}: {reason}")]
    Premise {
        rule: GlobalRule,
        machine: Int,
        reason: &'static str,
    },
    #[error("G-local on machine {machine}: {stuck}")]
    Stuck { machine: Int, stuck: Stuck },
}

/// Star values and fresh ids drawn by one handler attempt, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Draws {
    pub stars: Vec<Int>,
    pub ids: Vec<Int>,
}

/// Record-or-replay source of nondeterminism. Fresh ids come from a
/// monotone counter, so ids drawn by an attempt that is later reset show up
/// only as gaps. Star values are uniform in `0..star_domain`.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub star_domain: Int,
    pub next_id: Int,
    rng: ChaCha8Rng,
    /// Draws to hand out to a machine before falling back to fresh ones.
    pub replay: BTreeMap<Int, (VecDeque<Int>, VecDeque<Int>)>,
    /// Draws of each machine's current attempt (since its last G-start).
    pub attempt: BTreeMap<Int, Draws>,
    /// Draws of each machine's last committed attempt.
    pub committed: BTreeMap<Int, Draws>,
}

impl Oracle {
    pub fn new(seed: u64, star_domain: Int, next_id: Int) -> Oracle {
        Oracle {
            star_domain: star_domain.max(1),
            next_id,
            rng: ChaCha8Rng::seed_from_u64(seed),
            replay: BTreeMap::new(),
            attempt: BTreeMap::new(),
            committed: BTreeMap::new(),
        }
    }

    /// Makes machine `r`'s next draws come from `draws`.
    pub fn set_replay(&mut self, r: Int, draws: &Draws) {
        self.replay
            .insert(r, (draws.stars.iter().copied().collect(), draws.ids.iter().copied().collect()));
    }

    fn for_machine(&mut self, r: Int) -> MachineOracle<'_> {
        MachineOracle {
            oracle: self,
            machine: r,
            created: Vec::new(),
        }
    }
}

struct MachineOracle<'a> {
    oracle: &'a mut Oracle,
    machine: Int,
    created: Vec<(Int, String)>,
}

impl Nondet for MachineOracle<'_> {
    fn star(&mut self) -> Int {
        let o = &mut *self.oracle;
        let v = match o.replay.get_mut(&self.machine).and_then(|(s, _)| s.pop_front()) {
            Some(v) => v,
            None => o.rng.gen_range(0..o.star_domain),
        };
        o.attempt.entry(self.machine).or_default().stars.push(v);
        v
    }

    fn fresh(&mut self, class: &str) -> Int {
        let o = &mut *self.oracle;
        let v = match o.replay.get_mut(&self.machine).and_then(|(_, i)| i.pop_front()) {
            Some(v) => v,
            None => {
                let v = o.next_id;
                o.next_id += 1;
                v
            }
        };
        o.next_id = o.next_id.max(v + 1);
        o.attempt.entry(self.machine).or_default().ids.push(v);
        self.created.push((v, class.to_owned()));
        v
    }
}

/// `M; Π` plus the bookkeeping the rules leave implicit: the class of
/// each pending creation request, events delivered to the environment, and
/// the nondeterminism oracle.
#[derive(Clone, Debug)]
pub struct GlobalConfig {
    pub m: BTreeMap<Int, LocalConfig>,
    pub pi: BTreeMap<Int, Record>,
    /// Class of every id handed out by `create`.
    pub created: BTreeMap<Int, String>,
    /// Events sent to the environment, oldest first.
    pub env_out: Vec<(Int, Ev)>,
    pub oracle: Oracle,
}

/// `resetF(C, P)`: persistent fields from `P`, volatile ones from their
/// initializers.
pub fn reset_f(class: &ClassDef, p: &FieldMap) -> FieldMap {
    let mut f = p.clone();
    f.extend(class.volatile.iter().map(|(k, v)| (k.clone(), *v)));
    f
}

/// `initL(C, n_s, n_e, n_p)`.
pub fn init_l(class: &ClassDef, ns: Int, ne: Int, np: Int) -> LocalEnv {
    let mut l = class.locals.clone();
    l.insert(X_S.into(), ns);
    l.insert(X_E.into(), ne);
    l.insert(X_P.into(), np);
    l
}

fn persistent_part(class: &ClassDef, f: &FieldMap) -> FieldMap {
    f.iter()
        .filter(|(k, _)| class.is_persistent(k))
        .map(|(k, v)| (k.clone(), *v))
        .collect()
}

impl GlobalConfig {
    /// The program's initial machines, at rest, with the initial events
    /// from the environment in their inboxes.
    pub fn initial(prog: &Program, seed: u64, star_domain: Int) -> GlobalConfig {
        let next_id = prog.machines.keys().max().copied().unwrap_or(0).max(0) + 1;
        let mut g = GlobalConfig {
            m: BTreeMap::new(),
            pi: BTreeMap::new(),
            created: BTreeMap::new(),
            env_out: Vec::new(),
            oracle: Oracle::new(seed, star_domain, next_id),
        };
        for (id, cname) in &prog.machines {
            let class = &prog.classes[cname];
            g.add_machine(*id, class);
        }
        for (dest, e, p) in &prog.events {
            g.inject(*dest, *e, *p);
        }
        g
    }

    fn add_machine(&mut self, id: Int, class: &ClassDef) {
        let p = class.persistent.clone();
        self.m.insert(id, LocalConfig::at_rest(reset_f(class, &p)));
        self.pi.insert(
            id,
            Record {
                class: class.name.clone(),
                inbox: Vec::new(),
                outbox: Vec::new(),
                persistent: p,
                trace: Vec::new(),
            },
        );
    }

    /// Adds an event from the environment to `dest`'s inbox.
    pub fn inject(&mut self, dest: Int, e: Int, p: Int) -> bool {
        match self.pi.get_mut(&dest) {
            Some(rec) => {
                rec.inbox.insert(0, Ev::new(ENV, e, p));
                true
            }
            None => false,
        }
    }

    /// Machine state and persistent state, ignoring the oracle.
    pub fn same_state(&self, other: &GlobalConfig) -> bool {
        self.m == other.m && self.pi == other.pi && self.env_out == other.env_out
    }

    fn premise(rule: GlobalRule, machine: Int, ok: bool, reason: &'static str) -> Result<(), NotApplicable> {
        if ok {
            Ok(())
        } else {
            Err(NotApplicable::Premise { rule, machine, reason })
        }
    }

    /// True when G-start's premises hold for `r`.
    pub fn ready(&self, prog: &Program, r: Int) -> bool {
        self.check_start(prog, r).is_ok()
    }

    fn check_start(&self, prog: &Program, r: Int) -> Result<(), NotApplicable> {
        let (m, rec) = self.get(r)?;
        let class = &prog.classes[&rec.class];
        let p = |ok, reason| Self::premise(GlobalRule::Start, r, ok, reason);
        p(m.events.is_empty(), "event list not empty")?;
        p(m.stmt == Stmt::Skip && !m.busy, "machine not at rest")?;
        p(!rec.inbox.is_empty(), "inbox empty")?;
        p(rec.outbox.is_empty(), "outbox not empty")?;
        p(persistent_part(class, &m.fields) == rec.persistent, "F_p differs from P")
    }

    fn get(&self, r: Int) -> Result<(&LocalConfig, &Record), NotApplicable> {
        match (self.m.get(&r), self.pi.get(&r)) {
            (Some(m), Some(rec)) => Ok((m, rec)),
            _ => Err(NotApplicable::UnknownMachine(r)),
        }
    }

    /// Applies `rule` for machine `r` in place. On error nothing changes.
    pub fn apply(&mut self, prog: &Program, rule: GlobalRule, r: Int) -> Result<Option<LocalStep>, NotApplicable> {
        let (m, rec) = self.get(r)?;
        let class = &prog.classes[&rec.class];
        match rule {
            GlobalRule::Start => {
                self.check_start(prog, r)?;
                let head = *rec.inbox.last().expect("checked");
                let m = self.m.get_mut(&r).unwrap();
                m.locals = init_l(class, head.r, head.e, head.p);
                m.stmt = class.handler.clone();
                m.busy = true;
                self.oracle.attempt.insert(r, Draws::default());
                Ok(None)
            }
            GlobalRule::Local => {
                let p = |ok, reason| Self::premise(rule, r, ok, reason);
                p(m.busy, "machine not busy")?;
                p(rec.outbox.is_empty(), "outbox not empty")?;
                let mut next = m.clone();
                let mut o = self.oracle.for_machine(r);
                let step = reduce(&mut next, &mut o).map_err(|stuck| NotApplicable::Stuck { machine: r, stuck })?;
                let created = std::mem::take(&mut o.created);
                self.created.extend(created);
                self.m.insert(r, next);
                Ok(Some(step))
            }
            GlobalRule::Commit => {
                let p = |ok, reason| Self::premise(rule, r, ok, reason);
                p(m.busy && m.stmt == Stmt::Skip, "handler not finished")?;
                p(!rec.inbox.is_empty(), "inbox empty")?;
                p(rec.outbox.is_empty(), "outbox not empty")?;
                let fp = persistent_part(class, &m.fields);
                let m = self.m.get_mut(&r).unwrap();
                let events = std::mem::take(&mut m.events);
                m.busy = false;
                let rec = self.pi.get_mut(&r).unwrap();
                rec.inbox.pop();
                rec.outbox = events;
                rec.persistent = fp;
                let draws = self.oracle.attempt.remove(&r).unwrap_or_default();
                self.oracle.committed.insert(r, draws);
                Ok(None)
            }
            GlobalRule::Create | GlobalRule::Send => {
                let p = |ok, reason| Self::premise(rule, r, ok, reason);
                p(m.stmt == Stmt::Skip && !m.busy, "machine not at rest")?;
                let Some(&ev) = rec.outbox.last() else {
                    return Err(NotApplicable::Premise {
                        rule,
                        machine: r,
                        reason: "outbox empty",
                    });
                };
                if rule == GlobalRule::Create {
                    p(ev.e == N_CREATE, "outbox tail is not a creation request")?;
                    let Some(cname) = self.created.get(&ev.r).cloned() else {
                        return Err(NotApplicable::Premise {
                            rule,
                            machine: r,
                            reason: "id was not handed out by create",
                        });
                    };
                    p(!self.pi.contains_key(&ev.r) && ev.r != ENV, "id already in use")?;
                    let rec = self.pi.get_mut(&r).unwrap();
                    rec.outbox.pop();
                    rec.trace.insert(0, Ev::new(ev.r, N_CREATE, 0));
                    self.add_machine(ev.r, &prog.classes[&cname]);
                } else {
                    p(ev.e != N_CREATE, "outbox tail is a creation request")?;
                    p(ev.r == ENV || self.pi.contains_key(&ev.r), "destination does not exist")?;
                    let rec = self.pi.get_mut(&r).unwrap();
                    rec.outbox.pop();
                    rec.trace.insert(0, ev);
                    // looked up after the sender's update, so self-sends
                    // keep the outbox pop
                    match self.pi.get_mut(&ev.r) {
                        Some(dest) => dest.inbox.insert(0, Ev::new(r, ev.e, ev.p)),
                        None => self.env_out.push((r, ev)),
                    }
                }
                Ok(None)
            }
            GlobalRule::Reset => {
                let f = reset_f(class, &rec.persistent);
                self.m.insert(r, LocalConfig::at_rest(f));
                self.oracle.attempt.remove(&r);
                self.oracle.replay.remove(&r);
                Ok(None)
            }
        }
    }

    /// Pure form of [`apply`](Self::apply).
    pub fn step(&self, prog: &Program, rule: GlobalRule, r: Int) -> Result<GlobalConfig, NotApplicable> {
        let mut g = self.clone();
        g.apply(prog, rule, r)?;
        Ok(g)
    }

    /// Rules other than G-reset whose premises hold for `r`.
    pub fn enabled(&self, prog: &Program, r: Int) -> Vec<GlobalRule> {
        let Ok((m, rec)) = self.get(r) else { return Vec::new() };
        let mut out = Vec::new();
        if self.ready(prog, r) {
            out.push(GlobalRule::Start);
        }
        if m.busy && rec.outbox.is_empty() && m.stmt != Stmt::Skip {
            out.push(GlobalRule::Local);
        }
        if m.busy && m.stmt == Stmt::Skip && rec.outbox.is_empty() && !rec.inbox.is_empty() {
            out.push(GlobalRule::Commit);
        }
        if !m.busy && m.stmt == Stmt::Skip {
            if let Some(ev) = rec.outbox.last() {
                if ev.e == N_CREATE {
                    if self.created.contains_key(&ev.r) && !self.pi.contains_key(&ev.r) {
                        out.push(GlobalRule::Create);
                    }
                } else if ev.r == ENV || self.pi.contains_key(&ev.r) {
                    out.push(GlobalRule::Send);
                }
            }
        }
        out
    }

    /// Ghost traces, oldest event first.
    pub fn traces(&self) -> BTreeMap<Int, Vec<Ev>> {
        self.pi
            .iter()
            .map(|(id, rec)| (*id, rec.trace.iter().rev().copied().collect()))
            .collect()
    }

    /// One line per trace event: `machine dest type payload`.
    pub fn trace_dump(&self) -> String {
        let mut out = String::new();
        for (id, t) in self.traces() {
            for e in t {
                out.push_str(&format!("{id} {} {} {}\n", e.r, e.e, e.p));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("line {line}: expected `<rule> <machine>`")]
    Syntax { line: usize },
    #[error("step {index} ({rule} {machine}): {source}")]
    Step {
        index: usize,
        rule: GlobalRule,
        machine: Int,
        #[source]
        source: NotApplicable,
    },
}

/// Parses a schedule: one `<rule> <machine>` per line, `#` comments.
pub fn parse_schedule(text: &str) -> Result<Vec<(GlobalRule, Int)>, ScheduleError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let mut it = l.split_whitespace();
        let (Some(rule), Some(id), None) = (it.next(), it.next(), it.next()) else {
            return Err(ScheduleError::Syntax { line: i + 1 });
        };
        let rule = GlobalRule::parse(rule).ok_or(ScheduleError::Syntax { line: i + 1 })?;
        let id = id.parse().map_err(|_| ScheduleError::Syntax { line: i + 1 })?;
        out.push((rule, id));
    }
    Ok(out)
}

/// Runs `schedule` from `init`; a step whose premises fail is an error.
pub fn run_schedule(prog: &Program, init: &GlobalConfig, schedule: &[(GlobalRule, Int)]) -> Result<GlobalConfig, ScheduleError> {
    let mut g = init.clone();
    for (index, &(rule, machine)) in schedule.iter().enumerate() {
        g.apply(prog, rule, machine)
            .map_err(|source| ScheduleError::Step {
                index,
                rule,
                machine,
                source,
            })?;
    }
    Ok(g)
}

/// Runs machine `r` from ready through commit and until its outbox is
/// drained (or blocked), without resets. Returns the steps taken.
pub fn run_handler(prog: &Program, g: &mut GlobalConfig, r: Int, max_steps: usize) -> Result<Vec<GlobalRule>, NotApplicable> {
    let mut steps = Vec::new();
    g.apply(prog, GlobalRule::Start, r)?;
    steps.push(GlobalRule::Start);
    loop {
        if steps.len() > max_steps {
            return Err(NotApplicable::Premise {
                rule: GlobalRule::Local,
                machine: r,
                reason: "step bound exceeded",
            });
        }
        let next = g.enabled(prog, r);
        let Some(&rule) = next.iter().find(|x| **x != GlobalRule::Start) else {
            return Ok(steps);
        };
        g.apply(prog, rule, r)?;
        steps.push(rule);
    }
}

/// Deterministic reset-free execution: machines take turns in id order,
/// each processing one inbox event end to end, until nothing is enabled or
/// `max_handlers` events were processed. Returns the schedule.
pub fn run_round_robin(
    prog: &Program,
    g: &mut GlobalConfig,
    max_handlers: usize,
    max_steps: usize,
) -> Result<Vec<(GlobalRule, Int)>, NotApplicable> {
    let mut schedule = Vec::new();
    let mut handled = 0;
    loop {
        let mut progress = false;
        let ids: Vec<Int> = g.m.keys().copied().collect();
        for r in ids {
            // drain leftovers first (e.g. sends blocked earlier)
            while let Some(&rule) = g.enabled(prog, r).iter().find(|x| matches!(x, GlobalRule::Create | GlobalRule::Send)) {
                g.apply(prog, rule, r)?;
                schedule.push((rule, r));
                progress = true;
            }
            if handled < max_handlers && g.ready(prog, r) {
                for rule in run_handler(prog, g, r, max_steps)? {
                    schedule.push((rule, r));
                }
                handled += 1;
                progress = true;
            }
        }
        if !progress {
            return Ok(schedule);
        }
    }
}
