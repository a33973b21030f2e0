//! A second, deliberately literal implementation of the evaluation rules,
//! written against plain tuples and maps. The rule-faithfulness tests run
//! both implementations on random instances and demand identical results.

#![allow(dead_code)]

pub mod instances;

use std::collections::BTreeMap;

use rsm_semantics::{Expr, Program, Stmt, Value};

pub type Event = (i64, i64, i64);
/// Newest first, as the rules write `(n1, n2, n3), E`.
pub type Events = Vec<Event>;
pub type Map = BTreeMap<String, i64>;

pub const N_C: i64 = -1;

/// `E; F; L; s; b`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Loc {
    pub e: Events,
    pub f: Map,
    pub l: Map,
    pub s: Stmt,
    pub b: u8,
}

/// `C; I; O; P; T`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rec {
    pub c: String,
    pub i: Events,
    pub o: Events,
    pub p: Map,
    pub t: Events,
}

/// Choices for `★` and `fresh`, consumed front to back.
#[derive(Clone, Debug, Default)]
pub struct Choices {
    pub stars: Vec<i64>,
    pub ids: Vec<i64>,
}

impl Choices {
    fn star(&mut self) -> i64 {
        if self.stars.is_empty() {
            0
        } else {
            self.stars.remove(0)
        }
    }

    fn fresh(&mut self) -> i64 {
        self.ids.remove(0)
    }
}

fn oplus(sym: &str, a: i64, b: i64) -> i64 {
    let bit = |c: bool| if c { 1 } else { 0 };
    match sym {
        "+" => a.wrapping_add(b),
        "-" => a.wrapping_sub(b),
        "*" => a.wrapping_mul(b),
        "/" => {
            if b == 0 || (a == i64::MIN && b == -1) {
                0
            } else {
                a / b
            }
        }
        "%" => {
            if b == 0 || (a == i64::MIN && b == -1) {
                0
            } else {
                a % b
            }
        }
        "==" => bit(a == b),
        "!=" => bit(a != b),
        "<" => bit(a < b),
        "<=" => bit(a <= b),
        ">" => bit(a > b),
        ">=" => bit(a >= b),
        "&&" => bit(a != 0 && b != 0),
        "||" => bit(a != 0 || b != 0),
        other => panic!("unknown operator {other}"),
    }
}

fn val(f: &Map, l: &Map, v: &Value) -> Option<i64> {
    match v {
        Value::Int(n) => Some(*n),
        // E-var: L[x]
        Value::Var(x) => l.get(x).copied(),
        // E-volatile: F[f]
        Value::Field(x) => f.get(x).copied(),
    }
}

/// `F; L ⊢ e ⇓ n`, with the rule name.
pub fn eval(f: &Map, l: &Map, e: &Expr, ch: &mut Choices) -> Option<(&'static str, i64)> {
    match e {
        Expr::Val(v @ Value::Int(_)) => Some(("E-const", val(f, l, v)?)),
        Expr::Val(v @ Value::Var(_)) => Some(("E-var", val(f, l, v)?)),
        Expr::Val(v @ Value::Field(_)) => Some(("E-volatile", val(f, l, v)?)),
        // E-persistent: load f reads F[f]
        Expr::Load(x) => Some(("E-persistent", f.get(x).copied()?)),
        Expr::BinOp(op, v1, v2) => {
            let n1 = val(f, l, v1)?;
            let n2 = val(f, l, v2)?;
            Some(("E-binop", oplus(op.symbol(), n1, n2)))
        }
        Expr::Star => Some(("E-star", ch.star())),
    }
}

fn upd(m: &Map, k: &str, n: i64) -> Map {
    let mut m = m.clone();
    m.insert(k.to_owned(), n);
    m
}

fn cons(x: Event, e: &Events) -> Events {
    let mut out = vec![x];
    out.extend(e.iter().copied());
    out
}

/// `E; F; L; s → E1; F1; L1; s1`: the rule at the redex, the number of
/// sequencing congruence steps wrapped around it, and the result.
pub fn step(e: &Events, f: &Map, l: &Map, s: &Stmt, ch: &mut Choices) -> Option<(&'static str, usize, Events, Map, Map, Stmt)> {
    match s {
        Stmt::Skip => None,
        Stmt::Assign(x, ex) => {
            let (_, n) = eval(f, l, ex, ch)?;
            Some(("L-assign", 0, e.clone(), f.clone(), upd(l, x, n), Stmt::Skip))
        }
        Stmt::SetField(x, ex) => {
            let (_, n) = eval(f, l, ex, ch)?;
            Some(("L-field", 0, e.clone(), upd(f, x, n), l.clone(), Stmt::Skip))
        }
        Stmt::Store(x, ex) => {
            let (_, n) = eval(f, l, ex, ch)?;
            Some(("L-store", 0, e.clone(), upd(f, x, n), l.clone(), Stmt::Skip))
        }
        Stmt::If(v, s1, s2) => {
            let n = val(f, l, v)?;
            let s = if n != 0 { (**s1).clone() } else { (**s2).clone() };
            Some(("L-if", 0, e.clone(), f.clone(), l.clone(), s))
        }
        Stmt::Create(x, _) => {
            let nr = ch.fresh();
            Some(("L-create", 0, cons((nr, N_C, 0), e), f.clone(), upd(l, x, nr), Stmt::Skip))
        }
        Stmt::Send(v1, v2, v3) => {
            let (n1, n2, n3) = (val(f, l, v1)?, val(f, l, v2)?, val(f, l, v3)?);
            Some(("L-send", 0, cons((n1, n2, n3), e), f.clone(), l.clone(), Stmt::Skip))
        }
        Stmt::Seq(s1, s2) if **s1 == Stmt::Skip => Some(("L-seq-skip", 0, e.clone(), f.clone(), l.clone(), (**s2).clone())),
        Stmt::Seq(s1, s2) => {
            let (rule, depth, e1, f1, l1, s1p) = step(e, f, l, s1, ch)?;
            Some((rule, depth + 1, e1, f1, l1, Stmt::Seq(Box::new(s1p), s2.clone())))
        }
    }
}

pub struct World {
    pub m: BTreeMap<i64, Loc>,
    pub pi: BTreeMap<i64, Rec>,
    /// Events that left for the environment (id 0): (sender, event).
    pub env: Vec<(i64, Event)>,
}

fn split_p(sig: &Program, c: &str, f: &Map) -> Map {
    let class = &sig.classes[c];
    f.iter()
        .filter(|(k, _)| class.persistent.contains_key(*k))
        .map(|(k, v)| (k.clone(), *v))
        .collect()
}

fn init_l(sig: &Program, c: &str, ns: i64, ne: i64, np: i64) -> Map {
    let mut l: Map = sig.classes[c].locals.clone();
    l.insert("x_s".into(), ns);
    l.insert("x_e".into(), ne);
    l.insert("x_p".into(), np);
    l
}

fn reset_f(sig: &Program, c: &str, p: &Map) -> Map {
    let mut f = p.clone();
    for (k, v) in &sig.classes[c].volatile {
        f.insert(k.clone(), *v);
    }
    f
}

fn last(e: &Events) -> Option<Event> {
    e.last().copied()
}

fn tail(e: &Events) -> Events {
    e[..e.len() - 1].to_vec()
}

/// `S ⊢ M; Π ⟶ M1; Π1` for the named rule and machine, or `None` when
/// its premises do not hold. `created` gives the class of ids handed out
/// by `create`.
pub fn global(
    sig: &Program,
    rule: &str,
    r: i64,
    w: &World,
    created: &BTreeMap<i64, String>,
    ch: &mut Choices,
) -> Option<World> {
    let mr = w.m.get(&r)?;
    let pr = w.pi.get(&r)?;
    let mut m = w.m.clone();
    let mut pi = w.pi.clone();
    let mut env = w.env.clone();
    match rule {
        "G-start" => {
            // M(r) = ·; F; _; skip; 0   Π(r) = C; _, (ns, ne, np); ·; P; _
            if !mr.e.is_empty() || mr.s != Stmt::Skip || mr.b != 0 || !pr.o.is_empty() {
                return None;
            }
            let (ns, ne, np) = last(&pr.i)?;
            if split_p(sig, &pr.c, &mr.f) != pr.p {
                return None;
            }
            let l = init_l(sig, &pr.c, ns, ne, np);
            let s = sig.classes[&pr.c].handler.clone();
            m.insert(
                r,
                Loc {
                    e: vec![],
                    f: mr.f.clone(),
                    l,
                    s,
                    b: 1,
                },
            );
        }
        "G-local" => {
            if mr.b != 1 || !pr.o.is_empty() {
                return None;
            }
            let (_, _, e1, f1, l1, s1) = step(&mr.e, &mr.f, &mr.l, &mr.s, ch)?;
            m.insert(
                r,
                Loc {
                    e: e1,
                    f: f1,
                    l: l1,
                    s: s1,
                    b: 1,
                },
            );
        }
        "G-commit" => {
            // M(r) = E; Fp ∪ Fv; L; skip; 1   Π(r) = C; I, _; ·; _; T
            if mr.s != Stmt::Skip || mr.b != 1 || pr.i.is_empty() || !pr.o.is_empty() {
                return None;
            }
            let fp = split_p(sig, &pr.c, &mr.f);
            m.insert(
                r,
                Loc {
                    e: vec![],
                    f: mr.f.clone(),
                    l: mr.l.clone(),
                    s: Stmt::Skip,
                    b: 0,
                },
            );
            pi.insert(
                r,
                Rec {
                    c: pr.c.clone(),
                    i: tail(&pr.i),
                    o: mr.e.clone(),
                    p: fp,
                    t: pr.t.clone(),
                },
            );
        }
        "G-create" => {
            if mr.s != Stmt::Skip || mr.b != 0 {
                return None;
            }
            let (r1, n, _) = last(&pr.o)?;
            if n != N_C || r1 == 0 || w.pi.contains_key(&r1) {
                return None;
            }
            let c1 = created.get(&r1)?;
            // create(r, r1, C, Π)
            pi.insert(
                r,
                Rec {
                    c: pr.c.clone(),
                    i: pr.i.clone(),
                    o: tail(&pr.o),
                    p: pr.p.clone(),
                    t: cons((r1, N_C, 0), &pr.t),
                },
            );
            let p1 = sig.classes[c1].persistent.clone();
            pi.insert(
                r1,
                Rec {
                    c: c1.clone(),
                    i: vec![],
                    o: vec![],
                    p: p1.clone(),
                    t: vec![],
                },
            );
            m.insert(
                r1,
                Loc {
                    e: vec![],
                    f: reset_f(sig, c1, &p1),
                    l: Map::new(),
                    s: Stmt::Skip,
                    b: 0,
                },
            );
        }
        "G-send" => {
            if mr.s != Stmt::Skip || mr.b != 0 {
                return None;
            }
            let (r1, ne, np) = last(&pr.o)?;
            if ne == N_C || (r1 != 0 && !w.pi.contains_key(&r1)) {
                return None;
            }
            // send(r, r1, ne, np, Π), with Π(r1) read after r's update
            pi.insert(
                r,
                Rec {
                    c: pr.c.clone(),
                    i: pr.i.clone(),
                    o: tail(&pr.o),
                    p: pr.p.clone(),
                    t: cons((r1, ne, np), &pr.t),
                },
            );
            if r1 == 0 {
                env.push((r, (r1, ne, np)));
            } else {
                let d = pi[&r1].clone();
                pi.insert(
                    r1,
                    Rec {
                        i: cons((r, ne, np), &d.i),
                        ..d
                    },
                );
            }
        }
        "G-reset" => {
            m.insert(
                r,
                Loc {
                    e: vec![],
                    f: reset_f(sig, &pr.c, &pr.p),
                    l: Map::new(),
                    s: Stmt::Skip,
                    b: 0,
                },
            );
        }
        other => panic!("unknown rule {other}"),
    }
    Some(World { m, pi, env })
}
