//! Random rule instances, run through both the library and the oracle.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsm_semantics::global::{Draws, Oracle};
use rsm_semantics::local::{eval_expr_rule, step_local, FieldMap, LocalConfig, Tape};
use rsm_semantics::{BinOp, Ev, Expr, GlobalConfig, GlobalRule, Program, Record, Stmt, Value};

use super::{Choices, Events, Loc, Map, Rec, World, N_C};

pub const LOCAL_RULES: [&str; 14] = [
    "E-const",
    "E-var",
    "E-volatile",
    "E-persistent",
    "E-binop",
    "E-star",
    "L-assign",
    "L-field",
    "L-store",
    "L-if",
    "L-create",
    "L-send",
    "L-seq",
    "L-seq-skip",
];

pub const GLOBAL_RULES: [&str; 6] = ["G-start", "G-local", "G-commit", "G-create", "G-send", "G-reset"];

/// Outcome of comparing one rule on many instances.
#[derive(Debug, Default)]
pub struct Tally {
    /// Instances where the premises held and both sides stepped.
    pub applicable: usize,
    /// Instances both sides rejected.
    pub rejected: usize,
    pub mismatches: Vec<String>,
}

impl Tally {
    pub fn agreed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

const LOCALS: [&str; 5] = ["t", "u", "x_s", "x_e", "x_p"];
const PFIELDS: [&str; 2] = ["p", "q"];
const VFIELDS: [&str; 2] = ["v", "w"];

fn num(rng: &mut ChaCha8Rng) -> i64 {
    match rng.gen_range(0..40) {
        0 => i64::MIN,
        1 => i64::MAX,
        2 => -1,
        _ => rng.gen_range(-4..=4),
    }
}

fn events(rng: &mut ChaCha8Rng, max: usize) -> Events {
    (0..rng.gen_range(0..=max))
        .map(|_| (rng.gen_range(0..4), rng.gen_range(0..3), rng.gen_range(0..3)))
        .collect()
}

/// Scoped names, with a small chance of a name nothing binds.
fn local_name(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.05) {
        "nope".into()
    } else {
        (*LOCALS.choose(rng).unwrap()).into()
    }
}

fn field_name(rng: &mut ChaCha8Rng, names: &[&str]) -> String {
    if rng.gen_bool(0.05) {
        "nope".into()
    } else {
        (*names.choose(rng).unwrap()).into()
    }
}

fn value(rng: &mut ChaCha8Rng) -> Value {
    match rng.gen_range(0..3) {
        0 => Value::Int(num(rng)),
        1 => Value::Var(local_name(rng)),
        _ => Value::Field(field_name(rng, &VFIELDS)),
    }
}

fn expr_of(rng: &mut ChaCha8Rng, rule: &str) -> Expr {
    match rule {
        "E-const" => Expr::Val(Value::Int(num(rng))),
        "E-var" => Expr::Val(Value::Var(local_name(rng))),
        "E-volatile" => Expr::Val(Value::Field(field_name(rng, &VFIELDS))),
        "E-persistent" => Expr::Load(field_name(rng, &PFIELDS)),
        "E-binop" => Expr::BinOp(*BinOp::ALL.choose(rng).unwrap(), value(rng), value(rng)),
        "E-star" => Expr::Star,
        other => panic!("not an expression rule: {other}"),
    }
}

fn expr(rng: &mut ChaCha8Rng) -> Expr {
    let r = *LOCAL_RULES[..6].choose(rng).unwrap();
    expr_of(rng, r)
}

fn stmt(rng: &mut ChaCha8Rng, depth: u32) -> Stmt {
    let pick = if depth == 0 { rng.gen_range(0..7) } else { rng.gen_range(0..9) };
    match pick {
        0 => Stmt::Skip,
        1 => Stmt::Assign(local_name(rng), expr(rng)),
        2 => Stmt::SetField(field_name(rng, &VFIELDS), expr(rng)),
        3 => Stmt::Store(field_name(rng, &PFIELDS), expr(rng)),
        4 => Stmt::Create(local_name(rng), "A".into()),
        5 | 6 => Stmt::Send(value(rng), value(rng), value(rng)),
        7 => Stmt::if_(value(rng), stmt(rng, depth - 1), stmt(rng, depth - 1)),
        _ => Stmt::Seq(Box::new(stmt(rng, depth - 1)), Box::new(stmt(rng, depth - 1))),
    }
}

fn stmt_of(rng: &mut ChaCha8Rng, rule: &str) -> Stmt {
    match rule {
        "L-assign" => Stmt::Assign(local_name(rng), expr(rng)),
        "L-field" => Stmt::SetField(field_name(rng, &VFIELDS), expr(rng)),
        "L-store" => Stmt::Store(field_name(rng, &PFIELDS), expr(rng)),
        "L-if" => Stmt::if_(value(rng), stmt(rng, 2), stmt(rng, 2)),
        "L-create" => Stmt::Create(local_name(rng), "A".into()),
        "L-send" => Stmt::Send(value(rng), value(rng), value(rng)),
        "L-seq" => {
            let inner = *["L-assign", "L-field", "L-store", "L-if", "L-create", "L-send", "L-seq", "L-seq-skip"]
                .choose(rng)
                .unwrap();
            let first = if inner == "L-seq" && rng.gen_bool(0.5) {
                stmt_of(rng, "L-seq")
            } else {
                stmt_of(rng, if inner == "L-seq" { "L-send" } else { inner })
            };
            Stmt::Seq(Box::new(first), Box::new(stmt(rng, 2)))
        }
        "L-seq-skip" => Stmt::Seq(Box::new(Stmt::Skip), Box::new(stmt(rng, 2))),
        other => panic!("not a statement rule: {other}"),
    }
}

fn map(rng: &mut ChaCha8Rng, names: &[&str]) -> Map {
    names.iter().map(|n| ((*n).to_owned(), num(rng))).collect()
}

fn choices(rng: &mut ChaCha8Rng) -> Choices {
    Choices {
        stars: (0..16).map(|_| rng.gen_range(-2..5)).collect(),
        ids: (0..16).map(|i| 100 + i * 3 + rng.gen_range(0..3)).collect(),
    }
}

fn to_evs(e: &[Ev]) -> Events {
    e.iter().map(|x| (x.r, x.e, x.p)).collect()
}

fn from_evs(e: &Events) -> Vec<Ev> {
    e.iter().map(|&(r, n, p)| Ev::new(r, n, p)).collect()
}

fn expr_rule_name(r: rsm_semantics::local::ExprRule) -> String {
    format!("E-{}", format!("{r:?}").to_lowercase())
}

/// Compares `count` applicable instances of a local rule (expression
/// rules included).
pub fn local_rule(rule: &str, count: usize, seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    let mut guard = 0;
    while tally.applicable < count && guard < count * 20 {
        guard += 1;
        let f = {
            let mut f = map(&mut rng, &PFIELDS);
            f.extend(map(&mut rng, &VFIELDS));
            f
        };
        let l = map(&mut rng, &LOCALS);
        let ch = choices(&mut rng);
        let mut tape = Tape::new(ch.stars.clone(), ch.ids.clone());
        let mut och = ch.clone();
        if rule.starts_with("E-") {
            let e = expr_of(&mut rng, rule);
            let lib = eval_expr_rule(&f, &l, &e, &mut tape).ok();
            let ora = super::eval(&f, &l, &e, &mut och);
            match (lib, ora) {
                (None, None) => tally.rejected += 1,
                (Some((lr, ln)), Some((or, on))) if expr_rule_name(lr) == or && ln == on && or == rule => tally.applicable += 1,
                (lib, ora) => tally.mismatches.push(format!("{e}: library {lib:?}, oracle {ora:?}")),
            }
            continue;
        }
        let e = events(&mut rng, 3);
        let s = stmt_of(&mut rng, rule);
        let cfg = LocalConfig {
            events: from_evs(&e),
            fields: f.clone(),
            locals: l.clone(),
            stmt: s.clone(),
            busy: true,
        };
        let lib = step_local(&cfg, &mut tape).ok();
        let ora = super::step(&e, &f, &l, &s, &mut och);
        match (lib, ora) {
            (None, None) => tally.rejected += 1,
            (Some((st, c)), Some((or, depth, e1, f1, l1, s1))) => {
                let same = st.rule.name() == or
                    && st.congruence == depth
                    && to_evs(&c.events) == e1
                    && c.fields == f1
                    && c.locals == l1
                    && c.stmt == s1
                    && c.busy;
                let expected = if rule == "L-seq" { depth > 0 } else { or == rule && depth == 0 };
                if same && expected {
                    tally.applicable += 1;
                } else if same {
                    tally.rejected += 1;
                } else {
                    tally.mismatches.push(format!("{s}: library {st:?} {c}, oracle {or} {depth} {e1:?} {f1:?} {l1:?} {s1}"));
                }
            }
            (lib, ora) => tally.mismatches.push(format!("{s}: library {lib:?}, oracle {ora:?}")),
        }
    }
    if tally.applicable < count {
        tally.mismatches.push(format!("only {} applicable instances of {rule}", tally.applicable));
    }
    tally
}

fn loc_of(c: &LocalConfig) -> Loc {
    Loc {
        e: to_evs(&c.events),
        f: c.fields.clone(),
        l: c.locals.clone(),
        s: c.stmt.clone(),
        b: c.busy as u8,
    }
}

fn rec_of(r: &Record) -> Rec {
    Rec {
        c: r.class.clone(),
        i: to_evs(&r.inbox),
        o: to_evs(&r.outbox),
        p: r.persistent.clone(),
        t: to_evs(&r.trace),
    }
}

fn world_of(g: &GlobalConfig) -> World {
    World {
        m: g.m.iter().map(|(k, v)| (*k, loc_of(v))).collect(),
        pi: g.pi.iter().map(|(k, v)| (*k, rec_of(v))).collect(),
        env: g.env_out.iter().map(|(s, e)| (*s, (e.r, e.e, e.p))).collect(),
    }
}

/// Advances a busy configuration a few steps along its handler so that
/// instances reach every kind of redex.
fn advance(l: &mut Loc, n: usize, rng: &mut ChaCha8Rng) {
    for _ in 0..n {
        let mut ch = choices(rng);
        match super::step(&l.e, &l.f, &l.l, &l.s, &mut ch) {
            Some((_, _, e, f, lo, s)) => {
                l.e = e;
                l.f = f;
                l.l = lo;
                l.s = s;
            }
            None => return,
        }
    }
}

struct Instance {
    sig: Program,
    g: GlobalConfig,
    r: i64,
}

fn rest(sig: &Program, class: &str, p: &Map, rng: &mut ChaCha8Rng) -> Loc {
    let c = &sig.classes[class];
    let mut f = p.clone();
    for k in c.volatile.keys() {
        f.insert(k.clone(), num(rng));
    }
    Loc {
        e: vec![],
        f,
        l: Map::new(),
        s: Stmt::Skip,
        b: 0,
    }
}

fn busy(sig: &Program, class: &str, p: &Map, rng: &mut ChaCha8Rng) -> Loc {
    let c = &sig.classes[class];
    let mut l = rest(sig, class, p, rng);
    l.l = c.locals.clone();
    for x in ["x_s", "x_e", "x_p"] {
        l.l.insert(x.into(), rng.gen_range(0..4));
    }
    l.s = c.handler.clone();
    l.b = 1;
    let n = rng.gen_range(0..8);
    advance(&mut l, n, rng);
    l
}

fn instance(rule: &str, rng: &mut ChaCha8Rng) -> Instance {
    let sig = rsm_semantics::gen::program(rng.gen(), &rsm_semantics::gen::GenOptions::default());
    let classes: Vec<String> = sig.classes.keys().cloned().collect();
    let n = rng.gen_range(1..=3);
    let mut m = BTreeMap::new();
    let mut pi = BTreeMap::new();
    for id in 1..=n {
        let c = classes.choose(rng).unwrap().clone();
        let p: Map = sig.classes[&c].persistent.keys().map(|k| (k.clone(), rng.gen_range(-2..3))).collect();
        let mut loc = match rng.gen_range(0..3) {
            0 => rest(&sig, &c, &p, rng),
            1 => busy(&sig, &c, &p, rng),
            _ => {
                let mut l = busy(&sig, &c, &p, rng);
                advance(&mut l, 100, rng);
                l
            }
        };
        if rng.gen_bool(0.2) {
            loc.e = events(rng, 2);
        }
        let rec = Rec {
            c,
            i: events(rng, 3),
            o: if rng.gen_bool(0.5) { vec![] } else { events(rng, 2) },
            p,
            t: events(rng, 2),
        };
        m.insert(id, loc);
        pi.insert(id, rec);
    }
    let r = rng.gen_range(1..=n);
    let mut created = BTreeMap::new();
    let force = rng.gen_bool(0.85);
    if force {
        let class = pi[&r].c.clone();
        let p = pi[&r].p.clone();
        let rec = pi.get_mut(&r).unwrap();
        match rule {
            "G-start" => {
                rec.o.clear();
                if rec.i.is_empty() {
                    rec.i.push((0, 1, 2));
                }
                m.insert(r, rest(&sig, &class, &p, rng));
            }
            "G-local" => {
                rec.o.clear();
                m.insert(r, busy(&sig, &class, &p, rng));
            }
            "G-commit" => {
                rec.o.clear();
                if rec.i.is_empty() {
                    rec.i.push((0, 1, 2));
                }
                let mut l = busy(&sig, &class, &p, rng);
                advance(&mut l, 100, rng);
                m.insert(r, l);
            }
            "G-create" => {
                let id = 50 + rng.gen_range(0..5);
                rec.o.push((id, N_C, 0));
                let mut l = rest(&sig, &class, &p, rng);
                l.e = events(rng, 1);
                m.insert(r, l);
                created.insert(id, classes.choose(rng).unwrap().clone());
            }
            "G-send" => {
                let dest = rng.gen_range(0..=n);
                rec.o.push((dest, rng.gen_range(0..3), rng.gen_range(0..3)));
                m.insert(r, rest(&sig, &class, &p, rng));
            }
            _ => {}
        }
    }
    for rec in pi.values() {
        for &(id, t, _) in &rec.o {
            if t == N_C && !created.contains_key(&id) && rng.gen_bool(0.7) {
                created.insert(id, classes.choose(rng).unwrap().clone());
            }
        }
    }
    let g = GlobalConfig {
        m: m
            .into_iter()
            .map(|(k, l)| {
                (
                    k,
                    LocalConfig {
                        events: from_evs(&l.e),
                        fields: FieldMap::from_iter(l.f),
                        locals: l.l,
                        stmt: l.s,
                        busy: l.b == 1,
                    },
                )
            })
            .collect(),
        pi: pi
            .into_iter()
            .map(|(k, r)| {
                (
                    k,
                    Record {
                        class: r.c,
                        inbox: from_evs(&r.i),
                        outbox: from_evs(&r.o),
                        persistent: r.p,
                        trace: from_evs(&r.t),
                    },
                )
            })
            .collect(),
        created,
        env_out: Vec::new(),
        oracle: Oracle::new(rng.gen(), 3, 1000),
    };
    Instance { sig, g, r }
}

/// Compares `count` applicable instances of a global rule.
pub fn global_rule(rule: &str, count: usize, seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parsed = GlobalRule::parse(rule).expect("rule name");
    let mut tally = Tally::default();
    let mut guard = 0;
    while tally.applicable < count && guard < count * 20 {
        guard += 1;
        let Instance { sig, mut g, r } = instance(rule, &mut rng);
        let ch = choices(&mut rng);
        g.oracle.set_replay(
            r,
            &Draws {
                stars: ch.stars.clone(),
                ids: ch.ids.clone(),
            },
        );
        let before = world_of(&g);
        let ora = super::global(&sig, rule, r, &before, &g.created, &mut ch.clone());
        let lib = g.apply(&sig, parsed, r);
        match (lib, ora) {
            (Err(_), None) => tally.rejected += 1,
            (Ok(_), Some(w)) => {
                let after = world_of(&g);
                if after.m == w.m && after.pi == w.pi && after.env == w.env {
                    tally.applicable += 1;
                } else {
                    tally.mismatches.push(format!("{rule} on {r}: library {:?} {:?}, oracle {:?} {:?}", after.m, after.pi, w.m, w.pi));
                }
            }
            (lib, ora) => tally.mismatches.push(format!(
                "{rule} on {r}: library {:?}, oracle {}",
                lib.err(),
                if ora.is_some() { "steps" } else { "rejects" }
            )),
        }
    }
    if tally.applicable < count {
        tally.mismatches.push(format!("only {} applicable instances of {rule}", tally.applicable));
    }
    tally
}
