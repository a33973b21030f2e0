//! Random small programs for checking failure transparency.
//!
//! Generated handlers never let a volatile field reach a local, a
//! persistent field, a condition or an event, so every class passes the
//! non-interference check.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::syntax::{BinOp, ClassDef, Expr, Int, Program, Stmt, Value, X_E, X_P, X_S};

#[derive(Clone, Debug)]
pub struct GenOptions {
    /// Machines in the program, initial plus created.
    pub max_machines: usize,
    /// Non-skip statements per handler.
    pub max_stmts: usize,
    pub max_events: usize,
    /// Event types and literals range over `0..small`.
    pub small: Int,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            max_machines: 3,
            max_stmts: 6,
            max_events: 3,
            small: 3,
        }
    }
}

/// Non-skip, non-sequence statements of `s`.
pub fn stmt_count(s: &Stmt) -> usize {
    match s {
        Stmt::Skip => 0,
        Stmt::Seq(a, b) => stmt_count(a) + stmt_count(b),
        Stmt::If(_, a, b) => 1 + stmt_count(a) + stmt_count(b),
        _ => 1,
    }
}

const LOCALS: [&str; 2] = ["t", "u"];
const PERSISTENT: [&str; 2] = ["p", "q"];
const VOLATILE: [&str; 2] = ["v", "w"];
/// Local holding the child id (0 before the child exists).
const CHILD: &str = "c";
/// Persistent field remembering the child id.
const MADE: &str = "made";

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    opts: &'a GenOptions,
    /// Literal ids usable as send destinations.
    peers: Vec<Int>,
    has_child: bool,
}

impl Gen<'_> {
    fn small(&mut self) -> Int {
        self.rng.gen_range(0..self.opts.small)
    }

    fn var(&mut self) -> Value {
        let mut vars: Vec<&str> = vec![X_S, X_E, X_P, LOCALS[0], LOCALS[1]];
        if self.has_child {
            vars.push(CHILD);
        }
        Value::Var((*vars.choose(self.rng).unwrap()).into())
    }

    /// A value that never reads a volatile field.
    fn clean_value(&mut self) -> Value {
        if self.rng.gen_bool(0.3) {
            Value::Int(self.small())
        } else {
            self.var()
        }
    }

    fn any_value(&mut self) -> Value {
        if self.rng.gen_bool(0.4) {
            Value::Field((*VOLATILE.choose(self.rng).unwrap()).into())
        } else {
            self.clean_value()
        }
    }

    fn op(&mut self) -> BinOp {
        *BinOp::ALL.choose(self.rng).unwrap()
    }

    fn clean_expr(&mut self) -> Expr {
        match self.rng.gen_range(0..4) {
            0 => Expr::Val(self.clean_value()),
            1 => Expr::Load((*PERSISTENT.choose(self.rng).unwrap()).into()),
            2 => {
                let op = self.op();
                Expr::BinOp(op, self.clean_value(), self.clean_value())
            }
            _ => Expr::Star,
        }
    }

    fn volatile_expr(&mut self) -> Expr {
        match self.rng.gen_range(0..3) {
            0 => Expr::Val(self.any_value()),
            1 => {
                let op = self.op();
                Expr::BinOp(op, self.any_value(), self.any_value())
            }
            _ => self.clean_expr(),
        }
    }

    fn dest(&mut self) -> Value {
        let mut options = vec![Value::Var(X_S.into())];
        options.extend(self.peers.iter().map(|p| Value::Int(*p)));
        if self.has_child {
            options.push(Value::Var(CHILD.into()));
        }
        options.choose(self.rng).unwrap().clone()
    }

    /// A statement using at most `budget` (≥ 1) of the statement count.
    fn stmt(&mut self, budget: usize) -> Stmt {
        let pick = if budget >= 2 { self.rng.gen_range(0..6) } else { self.rng.gen_range(0..5) };
        match pick {
            0 => Stmt::Assign((*LOCALS.choose(self.rng).unwrap()).into(), self.clean_expr()),
            1 => Stmt::SetField((*VOLATILE.choose(self.rng).unwrap()).into(), self.volatile_expr()),
            2 => Stmt::Store((*PERSISTENT.choose(self.rng).unwrap()).into(), self.clean_expr()),
            3 | 4 => {
                let e = Value::Int(self.small());
                Stmt::Send(self.dest(), e, self.clean_value())
            }
            _ => {
                let rest = budget - 1;
                let a = self.rng.gen_range(0..=rest);
                let cond = self.clean_value();
                let s1 = self.block(a);
                let s2 = self.block(rest - a);
                Stmt::if_(cond, s1, s2)
            }
        }
    }

    /// A sequence of statements using at most `budget`.
    fn block(&mut self, budget: usize) -> Stmt {
        let mut left = if budget == 0 { 0 } else { self.rng.gen_range(1..=budget) };
        let mut out = Vec::new();
        while left > 0 {
            let s = self.stmt(left);
            left -= stmt_count(&s).min(left);
            out.push(s);
        }
        Stmt::seq(out)
    }
}

fn class(name: &str, handler: Stmt, with_child: bool) -> ClassDef {
    let mut persistent: BTreeMap<String, Int> = PERSISTENT.iter().map(|f| ((*f).to_owned(), 0)).collect();
    let mut locals: BTreeMap<String, Int> = LOCALS.iter().map(|x| ((*x).to_owned(), 0)).collect();
    if with_child {
        persistent.insert(MADE.into(), 0);
        locals.insert(CHILD.into(), 0);
    }
    ClassDef {
        name: name.into(),
        persistent,
        volatile: VOLATILE.iter().map(|f| ((*f).to_owned(), 0)).collect(),
        locals,
        handler,
    }
}

/// A random valid program. Half of the programs start one machine that
/// creates a chain of children (each class creates at most one machine,
/// guarded by a persistent field); the others start up to
/// `max_machines` machines that only exchange events.
pub fn program(seed: u64, opts: &GenOptions) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let machines_n = rng.gen_range(1..=opts.max_machines.max(1));
    let chain = machines_n > 1 && rng.gen_bool(0.5);
    let mut classes = BTreeMap::new();
    let mut machines = BTreeMap::new();
    if chain {
        for i in 0..machines_n {
            let name = format!("C{i}");
            let creates = i + 1 < machines_n;
            let mut g = Gen {
                rng: &mut rng,
                opts,
                peers: vec![1],
                has_child: creates,
            };
            let handler = if creates {
                // c := load made; if c { .. } else { create c; store made c }; ..
                let body_budget = opts.max_stmts.saturating_sub(4);
                let a = g.rng.gen_range(0..=body_budget);
                let then = g.block(a);
                let tail = g.block(body_budget - a);
                Stmt::seq([
                    Stmt::Assign(CHILD.into(), Expr::Load(MADE.into())),
                    Stmt::if_(
                        Value::Var(CHILD.into()),
                        then,
                        Stmt::seq([
                            Stmt::Create(CHILD.into(), format!("C{}", i + 1)),
                            Stmt::Store(MADE.into(), Expr::Val(Value::Var(CHILD.into()))),
                        ]),
                    ),
                    tail,
                ])
            } else {
                g.block(opts.max_stmts)
            };
            classes.insert(name.clone(), class(&name, handler, creates));
        }
        machines.insert(1, "C0".to_owned());
    } else {
        let n_classes = rng.gen_range(1..=machines_n);
        let peers: Vec<Int> = (1..=machines_n as Int).collect();
        for i in 0..n_classes {
            let name = format!("C{i}");
            let mut g = Gen {
                rng: &mut rng,
                opts,
                peers: peers.clone(),
                has_child: false,
            };
            let handler = g.block(opts.max_stmts);
            classes.insert(name.clone(), class(&name, handler, false));
        }
        for id in 1..=machines_n as Int {
            machines.insert(id, format!("C{}", rng.gen_range(0..n_classes)));
        }
    }
    let ids: Vec<Int> = machines.keys().copied().collect();
    let events = (0..rng.gen_range(1..=opts.max_events.max(1)))
        .map(|_| (*ids.choose(&mut rng).unwrap(), rng.gen_range(0..opts.small), rng.gen_range(0..opts.small)))
        .collect();
    Program {
        classes,
        machines,
        events,
    }
}
