//! Abstract syntax of the calculus and program validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Machine ids, event types, payloads and field values are all integers.
pub type Int = i64;

/// Name of the local bound to the current event's source.
pub const X_S: &str = "x_s";
/// Name of the local bound to the current event's type.
pub const X_E: &str = "x_e";
/// Name of the local bound to the current event's payload.
pub const X_P: &str = "x_p";

/// Event type of creation requests.
pub const N_CREATE: Int = -1;
/// Id of the environment: initial events come from it, and events sent to
/// it leave the system.
pub const ENV: Int = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    pub const ALL: [BinOp; 13] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Mod,
        BinOp::Eq,
        BinOp::Ne,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
        BinOp::And,
        BinOp::Or,
    ];

    /// Total on all inputs: arithmetic wraps, division and remainder by
    /// zero (or overflowing `MIN / -1`) give zero, comparisons and
    /// connectives give 0 or 1.
    pub fn apply(self, a: Int, b: Int) -> Int {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Div => a.checked_div(b).unwrap_or(0),
            BinOp::Mod => a.checked_rem(b).unwrap_or(0),
            BinOp::Eq => (a == b) as Int,
            BinOp::Ne => (a != b) as Int,
            BinOp::Lt => (a < b) as Int,
            BinOp::Le => (a <= b) as Int,
            BinOp::Gt => (a > b) as Int,
            BinOp::Ge => (a >= b) as Int,
            BinOp::And => (a != 0 && b != 0) as Int,
            BinOp::Or => (a != 0 || b != 0) as Int,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }

    pub fn from_symbol(s: &str) -> Option<BinOp> {
        BinOp::ALL.into_iter().find(|op| op.symbol() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Value {
    Int(Int),
    Var(String),
    /// A volatile field read directly.
    Field(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Val(Value),
    /// Reads a persistent field.
    Load(String),
    BinOp(BinOp, Value, Value),
    Star,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Stmt {
    Skip,
    Assign(String, Expr),
    /// Assignment to a volatile field.
    SetField(String, Expr),
    /// Update of a persistent field.
    Store(String, Expr),
    If(Value, Box<Stmt>, Box<Stmt>),
    Seq(Box<Stmt>, Box<Stmt>),
    Create(String, String),
    Send(Value, Value, Value),
}

impl Stmt {
    /// Right-nested sequence of `stmts`; `skip` when empty.
    pub fn seq(stmts: impl IntoIterator<Item = Stmt>) -> Stmt {
        let v: Vec<Stmt> = stmts.into_iter().collect();
        v.into_iter()
            .rev()
            .reduce(|acc, s| Stmt::Seq(Box::new(s), Box::new(acc)))
            .unwrap_or(Stmt::Skip)
    }

    pub fn if_(v: Value, a: Stmt, b: Stmt) -> Stmt {
        Stmt::If(v, Box::new(a), Box::new(b))
    }

    /// Number of non-sequence statements.
    pub fn size(&self) -> usize {
        match self {
            Stmt::Seq(a, b) => a.size() + b.size(),
            Stmt::If(_, a, b) => 1 + a.size() + b.size(),
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassDef {
    pub name: String,
    pub persistent: BTreeMap<String, Int>,
    pub volatile: BTreeMap<String, Int>,
    pub locals: BTreeMap<String, Int>,
    pub handler: Stmt,
}

impl ClassDef {
    pub fn is_persistent(&self, f: &str) -> bool {
        self.persistent.contains_key(f)
    }

    pub fn is_volatile(&self, f: &str) -> bool {
        self.volatile.contains_key(f)
    }
}

/// An event as it sits in a list: `(r, n_e, n_p)` where `r` is the
/// destination in output lists and the source in inboxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ev {
    pub r: Int,
    pub e: Int,
    pub p: Int,
}

impl Ev {
    pub fn new(r: Int, e: Int, p: Int) -> Ev {
        Ev { r, e, p }
    }
}

impl fmt::Display for Ev {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.r, self.e, self.p)
    }
}

/// Class signature plus an initial population.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub classes: BTreeMap<String, ClassDef>,
    /// Initial machines: id → class.
    pub machines: BTreeMap<Int, String>,
    /// Initial events from the environment, in arrival order:
    /// (destination, type, payload).
    pub events: Vec<(Int, Int, Int)>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("class `{class}`: unknown class `{target}` in create")]
    UnknownCreateClass { class: String, target: String },
    #[error("class `{class}`: `{name}` is not a volatile field")]
    NotVolatile { class: String, name: String },
    #[error("class `{class}`: `{name}` is not a persistent field")]
    NotPersistent { class: String, name: String },
    #[error("class `{class}`: unbound variable `{name}`")]
    Unbound { class: String, name: String },
    #[error("class `{class}`: name `{name}` is declared twice")]
    Duplicate { class: String, name: String },
    #[error("machine {id}: unknown class `{class}`")]
    UnknownMachineClass { id: Int, class: String },
    #[error("machine id {0} is reserved")]
    ReservedId(Int),
    #[error("event for unknown machine {0}")]
    UnknownDestination(Int),
}

impl Program {
    pub fn class(&self, name: &str) -> Option<&ClassDef> {
        self.classes.get(name)
    }

    /// Checks scoping: values name locals (or the three specials) or
    /// volatile fields, `load`/`store` name persistent fields, and every
    /// created class exists.
    pub fn validate(&self) -> Result<(), ProgramError> {
        for c in self.classes.values() {
            let mut seen = BTreeSet::new();
            let names = c.persistent.keys().chain(c.volatile.keys()).chain(c.locals.keys());
            for n in names {
                if !seen.insert(n.as_str()) || [X_S, X_E, X_P].contains(&n.as_str()) {
                    return Err(ProgramError::Duplicate {
                        class: c.name.clone(),
                        name: n.clone(),
                    });
                }
            }
            self.check_stmt(c, &c.handler)?;
        }
        for (id, class) in &self.machines {
            if *id == ENV {
                return Err(ProgramError::ReservedId(*id));
            }
            if !self.classes.contains_key(class) {
                return Err(ProgramError::UnknownMachineClass {
                    id: *id,
                    class: class.clone(),
                });
            }
        }
        for (dest, _, _) in &self.events {
            if !self.machines.contains_key(dest) {
                return Err(ProgramError::UnknownDestination(*dest));
            }
        }
        Ok(())
    }

    fn check_value(&self, c: &ClassDef, v: &Value) -> Result<(), ProgramError> {
        match v {
            Value::Int(_) => Ok(()),
            Value::Var(x) if c.locals.contains_key(x) || [X_S, X_E, X_P].contains(&x.as_str()) => Ok(()),
            Value::Var(x) => Err(ProgramError::Unbound {
                class: c.name.clone(),
                name: x.clone(),
            }),
            Value::Field(f) if c.is_volatile(f) => Ok(()),
            Value::Field(f) => Err(ProgramError::NotVolatile {
                class: c.name.clone(),
                name: f.clone(),
            }),
        }
    }

    fn check_expr(&self, c: &ClassDef, e: &Expr) -> Result<(), ProgramError> {
        match e {
            Expr::Val(v) => self.check_value(c, v),
            Expr::Load(f) if c.is_persistent(f) => Ok(()),
            Expr::Load(f) => Err(ProgramError::NotPersistent {
                class: c.name.clone(),
                name: f.clone(),
            }),
            Expr::BinOp(_, a, b) => {
                self.check_value(c, a)?;
                self.check_value(c, b)
            }
            Expr::Star => Ok(()),
        }
    }

    fn check_local(&self, c: &ClassDef, x: &str) -> Result<(), ProgramError> {
        if c.locals.contains_key(x) || [X_S, X_E, X_P].contains(&x) {
            Ok(())
        } else {
            Err(ProgramError::Unbound {
                class: c.name.clone(),
                name: x.to_owned(),
            })
        }
    }

    fn check_stmt(&self, c: &ClassDef, s: &Stmt) -> Result<(), ProgramError> {
        match s {
            Stmt::Skip => Ok(()),
            Stmt::Assign(x, e) => {
                self.check_local(c, x)?;
                self.check_expr(c, e)
            }
            Stmt::SetField(f, e) => {
                if !c.is_volatile(f) {
                    return Err(ProgramError::NotVolatile {
                        class: c.name.clone(),
                        name: f.clone(),
                    });
                }
                self.check_expr(c, e)
            }
            Stmt::Store(f, e) => {
                if !c.is_persistent(f) {
                    return Err(ProgramError::NotPersistent {
                        class: c.name.clone(),
                        name: f.clone(),
                    });
                }
                self.check_expr(c, e)
            }
            Stmt::If(v, a, b) => {
                self.check_value(c, v)?;
                self.check_stmt(c, a)?;
                self.check_stmt(c, b)
            }
            Stmt::Seq(a, b) => {
                self.check_stmt(c, a)?;
                self.check_stmt(c, b)
            }
            Stmt::Create(x, target) => {
                self.check_local(c, x)?;
                if self.classes.contains_key(target) {
                    Ok(())
                } else {
                    Err(ProgramError::UnknownCreateClass {
                        class: c.name.clone(),
                        target: target.clone(),
                    })
                }
            }
            Stmt::Send(a, b, d) => {
                self.check_value(c, a)?;
                self.check_value(c, b)?;
                self.check_value(c, d)
            }
        }
    }
}
