//! Local judgment: expression evaluation and one-step statement reduction
//! of a single machine's handler.

use std::collections::BTreeMap;
use std::fmt;

use crate::syntax::{Ev, Expr, Int, Stmt, Value, N_CREATE};

pub type FieldMap = BTreeMap<String, Int>;
pub type LocalEnv = BTreeMap<String, Int>;

/// Source of nondeterminism for `star` and fresh ids.
pub trait Nondet {
    fn star(&mut self) -> Int;
    /// A fresh machine id for an instance of `class`.
    fn fresh(&mut self, class: &str) -> Int;
}

/// A local configuration `E; F; L; s; b`. Event lists keep the most
/// recently added event at index 0, the way the rules write `(n1, n2, n3), E`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LocalConfig {
    pub events: Vec<Ev>,
    pub fields: FieldMap,
    pub locals: LocalEnv,
    pub stmt: Stmt,
    pub busy: bool,
}

impl LocalConfig {
    /// At rest: no events, no locals, `skip`, not busy.
    pub fn at_rest(fields: FieldMap) -> LocalConfig {
        LocalConfig {
            events: Vec::new(),
            fields,
            locals: LocalEnv::new(),
            stmt: Stmt::Skip,
            busy: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExprRule {
    /// An integer literal.
    Const,
    Var,
    Volatile,
    Persistent,
    BinOp,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LocalRule {
    Assign,
    SetField,
    Store,
    If,
    Create,
    Send,
    /// `skip; s → s`.
    SeqSkip,
}

impl LocalRule {
    pub const ALL: [LocalRule; 7] = [
        LocalRule::Assign,
        LocalRule::SetField,
        LocalRule::Store,
        LocalRule::If,
        LocalRule::Create,
        LocalRule::Send,
        LocalRule::SeqSkip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LocalRule::Assign => "L-assign",
            LocalRule::SetField => "L-field",
            LocalRule::Store => "L-store",
            LocalRule::If => "L-if",
            LocalRule::Create => "L-create",
            LocalRule::Send => "L-send",
            LocalRule::SeqSkip => "L-seq-skip",
        }
    }
}

/// One reduction: the rule applied at the redex and how many `s1; s2`
/// congruence steps (the L-seq rule) lead to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalStep {
    pub rule: LocalRule,
    pub congruence: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum Stuck {
    #[error("unbound variable `{0}`")]
    UnboundVar(String),
    #[error("unbound field `{0}`")]
    UnboundField(String),
    #[error("`skip` does not reduce")]
    Terminal,
}

pub fn eval_value(fields: &FieldMap, locals: &LocalEnv, v: &Value) -> Result<Int, Stuck> {
    match v {
        Value::Int(n) => Ok(*n),
        Value::Var(x) => locals.get(x).copied().ok_or_else(|| Stuck::UnboundVar(x.clone())),
        Value::Field(f) => fields.get(f).copied().ok_or_else(|| Stuck::UnboundField(f.clone())),
    }
}

/// `F; L ⊢ e ⇓ n`, also returning the rule used.
pub fn eval_expr_rule(
    fields: &FieldMap,
    locals: &LocalEnv,
    e: &Expr,
    nd: &mut dyn Nondet,
) -> Result<(ExprRule, Int), Stuck> {
    match e {
        Expr::Val(v) => {
            let rule = match v {
                Value::Int(_) => ExprRule::Const,
                Value::Var(_) => ExprRule::Var,
                Value::Field(_) => ExprRule::Volatile,
            };
            Ok((rule, eval_value(fields, locals, v)?))
        }
        Expr::Load(f) => Ok((
            ExprRule::Persistent,
            fields.get(f).copied().ok_or_else(|| Stuck::UnboundField(f.clone()))?,
        )),
        Expr::BinOp(op, a, b) => {
            let (x, y) = (eval_value(fields, locals, a)?, eval_value(fields, locals, b)?);
            Ok((ExprRule::BinOp, op.apply(x, y)))
        }
        Expr::Star => Ok((ExprRule::Star, nd.star())),
    }
}

pub fn eval_expr(fields: &FieldMap, locals: &LocalEnv, e: &Expr, nd: &mut dyn Nondet) -> Result<Int, Stuck> {
    eval_expr_rule(fields, locals, e, nd).map(|(_, n)| n)
}

/// `E; F; L; s → E1; F1; L1; s1`. The busy bit is left as is.
pub fn step_local(cfg: &LocalConfig, nd: &mut dyn Nondet) -> Result<(LocalStep, LocalConfig), Stuck> {
    let mut next = cfg.clone();
    let step = reduce(&mut next, nd)?;
    Ok((step, next))
}

/// Reduces `cfg.stmt` in place.
pub fn reduce(cfg: &mut LocalConfig, nd: &mut dyn Nondet) -> Result<LocalStep, Stuck> {
    let stmt = std::mem::replace(&mut cfg.stmt, Stmt::Skip);
    match reduce_stmt(stmt, &mut cfg.events, &mut cfg.fields, &mut cfg.locals, nd) {
        Ok((s, step)) => {
            cfg.stmt = s;
            Ok(step)
        }
        Err((s, e)) => {
            cfg.stmt = s;
            Err(e)
        }
    }
}

type Reduced = Result<(Stmt, LocalStep), (Stmt, Stuck)>;

fn redex(s: Stmt, rule: LocalRule) -> Reduced {
    Ok((s, LocalStep { rule, congruence: 0 }))
}

fn reduce_stmt(s: Stmt, events: &mut Vec<Ev>, fields: &mut FieldMap, locals: &mut LocalEnv, nd: &mut dyn Nondet) -> Reduced {
    macro_rules! eval {
        ($e:expr, $orig:expr) => {
            match eval_expr(fields, locals, $e, nd) {
                Ok(n) => n,
                Err(err) => return Err(($orig, err)),
            }
        };
    }
    macro_rules! value {
        ($v:expr, $orig:expr) => {
            match eval_value(fields, locals, $v) {
                Ok(n) => n,
                Err(err) => return Err(($orig, err)),
            }
        };
    }
    match s {
        Stmt::Skip => Err((Stmt::Skip, Stuck::Terminal)),
        Stmt::Assign(ref x, ref e) => {
            let n = eval!(e, s.clone());
            locals.insert(x.clone(), n);
            redex(Stmt::Skip, LocalRule::Assign)
        }
        Stmt::SetField(ref f, ref e) => {
            let n = eval!(e, s.clone());
            fields.insert(f.clone(), n);
            redex(Stmt::Skip, LocalRule::SetField)
        }
        Stmt::Store(ref f, ref e) => {
            let n = eval!(e, s.clone());
            fields.insert(f.clone(), n);
            redex(Stmt::Skip, LocalRule::Store)
        }
        Stmt::If(ref v, _, _) => {
            let n = value!(v, s.clone());
            let Stmt::If(_, a, b) = s else { unreachable!() };
            redex(if n != 0 { *a } else { *b }, LocalRule::If)
        }
        Stmt::Create(ref x, ref class) => {
            let id = nd.fresh(class);
            events.insert(0, Ev::new(id, N_CREATE, 0));
            locals.insert(x.clone(), id);
            redex(Stmt::Skip, LocalRule::Create)
        }
        Stmt::Send(ref a, ref b, ref c) => {
            let (n1, n2, n3) = (value!(a, s.clone()), value!(b, s.clone()), value!(c, s.clone()));
            events.insert(0, Ev::new(n1, n2, n3));
            redex(Stmt::Skip, LocalRule::Send)
        }
        Stmt::Seq(a, b) => {
            if *a == Stmt::Skip {
                return redex(*b, LocalRule::SeqSkip);
            }
            match reduce_stmt(*a, events, fields, locals, nd) {
                Ok((a1, step)) => Ok((
                    Stmt::Seq(Box::new(a1), b),
                    LocalStep {
                        congruence: step.congruence + 1,
                        ..step
                    },
                )),
                Err((a0, e)) => Err((Stmt::Seq(Box::new(a0), b), e)),
            }
        }
    }
}

/// A fixed tape of star values and fresh ids; exhausted tapes yield 0 and
/// ids counting up from `next_id`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tape {
    pub stars: Vec<Int>,
    pub ids: Vec<Int>,
    pub star_pos: usize,
    pub id_pos: usize,
    pub next_id: Int,
}

impl Tape {
    pub fn new(stars: Vec<Int>, ids: Vec<Int>) -> Tape {
        Tape {
            stars,
            ids,
            ..Tape::default()
        }
    }
}

impl Nondet for Tape {
    fn star(&mut self) -> Int {
        let v = self.stars.get(self.star_pos).copied().unwrap_or(0);
        self.star_pos += 1;
        v
    }

    fn fresh(&mut self, _class: &str) -> Int {
        let v = match self.ids.get(self.id_pos) {
            Some(v) => *v,
            None => {
                self.next_id += 1;
                self.next_id
            }
        };
        self.id_pos += 1;
        v
    }
}

impl fmt::Display for LocalConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E=[")?;
        for (i, e) in self.events.iter().enumerate() {
            write!(f, "{}{e}", if i > 0 { ", " } else { "" })?;
        }
        write!(f, "] F={:?} L={:?} s={} b={}", self.fields, self.locals, self.stmt, self.busy as u8)
    }
}
