//! S-expression concrete syntax.
//!
//! ```text
//! (program
//!   (class Counter
//!     (persistent (count 0))
//!     (volatile (seen 0))
//!     (locals (n 0))
//!     (handler
//!       (seq (:= n (load count))
//!            (:= n (+ n 1))
//!            (store count n)
//!            (set seen (+ seen 1))
//!            (send x_s 1 n))))
//!   (machines (1 Counter))
//!   (events (1 0 0)))
//! ```
//!
//! Statements: `skip`, `(:= x e)`, `(set f e)` for volatile fields,
//! `(store f e)`, `(if v s1 s2)`, `(seq s ...)`, `(create x C)`,
//! `(send v1 v2 v3)`. Expressions: a value, `(load f)`, `(op v1 v2)` or
//! `star`. A symbol value names a volatile field if the class has one by
//! that name, otherwise a local. `;` starts a comment.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::syntax::{BinOp, ClassDef, Expr, Int, Program, ProgramError, Stmt, Value};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Program(#[from] ProgramError),
}

#[derive(Clone, Debug, PartialEq)]
enum Sexp {
    Atom(String, usize),
    List(Vec<Sexp>, usize),
}

impl Sexp {
    fn line(&self) -> usize {
        match self {
            Sexp::Atom(_, l) | Sexp::List(_, l) => *l,
        }
    }
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError::Syntax { line, msg: msg.into() })
}

fn read_all(text: &str) -> Result<Vec<Sexp>, ParseError> {
    let mut stack: Vec<(Vec<Sexp>, usize)> = vec![(Vec::new(), 1)];
    let mut line = 1;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\n' => line += 1,
            ';' => {
                while chars.peek().is_some_and(|c| *c != '\n') {
                    chars.next();
                }
            }
            '(' => stack.push((Vec::new(), line)),
            ')' => {
                let (items, start) = stack.pop().expect("root frame");
                let Some(parent) = stack.last_mut() else {
                    return err(line, "unbalanced `)`");
                };
                parent.0.push(Sexp::List(items, start));
            }
            c if c.is_whitespace() => {}
            c => {
                let mut atom = String::from(c);
                while let Some(&n) = chars.peek() {
                    if n.is_whitespace() || n == '(' || n == ')' || n == ';' {
                        break;
                    }
                    atom.push(n);
                    chars.next();
                }
                stack.last_mut().expect("root frame").0.push(Sexp::Atom(atom, line));
            }
        }
    }
    if stack.len() != 1 {
        return err(line, "unclosed `(`");
    }
    Ok(stack.pop().unwrap().0)
}

fn atom(s: &Sexp) -> Result<&str, ParseError> {
    match s {
        Sexp::Atom(a, _) => Ok(a),
        Sexp::List(_, l) => err(*l, "expected an atom"),
    }
}

fn int(s: &Sexp) -> Result<Int, ParseError> {
    let a = atom(s)?;
    a.parse().or_else(|_| err(s.line(), format!("expected an integer, got `{a}`")))
}

fn list(s: &Sexp) -> Result<&[Sexp], ParseError> {
    match s {
        Sexp::List(v, _) => Ok(v),
        Sexp::Atom(a, l) => err(*l, format!("expected a list, got `{a}`")),
    }
}

/// Splits `(head rest...)`.
fn form(s: &Sexp) -> Result<(&str, &[Sexp]), ParseError> {
    let items = list(s)?;
    match items.split_first() {
        Some((h, rest)) => Ok((atom(h)?, rest)),
        None => err(s.line(), "empty form"),
    }
}

fn arity(s: &Sexp, rest: &[Sexp], n: usize) -> Result<(), ParseError> {
    if rest.len() == n {
        Ok(())
    } else {
        err(s.line(), format!("expected {n} arguments, got {}", rest.len()))
    }
}

fn bindings(items: &[Sexp]) -> Result<BTreeMap<String, Int>, ParseError> {
    let mut out = BTreeMap::new();
    for b in items {
        let pair = list(b)?;
        if pair.len() != 2 {
            return err(b.line(), "expected (name value)");
        }
        out.insert(atom(&pair[0])?.to_owned(), int(&pair[1])?);
    }
    Ok(out)
}

struct ClassScope<'a> {
    volatile: &'a BTreeMap<String, Int>,
}

impl ClassScope<'_> {
    fn value(&self, s: &Sexp) -> Result<Value, ParseError> {
        let a = atom(s)?;
        if let Ok(n) = a.parse::<Int>() {
            return Ok(Value::Int(n));
        }
        if self.volatile.contains_key(a) {
            Ok(Value::Field(a.to_owned()))
        } else {
            Ok(Value::Var(a.to_owned()))
        }
    }

    fn expr(&self, s: &Sexp) -> Result<Expr, ParseError> {
        if let Sexp::Atom(a, _) = s {
            if a == "star" || a == "*" {
                return Ok(Expr::Star);
            }
            return Ok(Expr::Val(self.value(s)?));
        }
        let (head, rest) = form(s)?;
        if head == "load" {
            arity(s, rest, 1)?;
            return Ok(Expr::Load(atom(&rest[0])?.to_owned()));
        }
        match BinOp::from_symbol(head) {
            Some(op) => {
                arity(s, rest, 2)?;
                Ok(Expr::BinOp(op, self.value(&rest[0])?, self.value(&rest[1])?))
            }
            None => err(s.line(), format!("unknown expression form `{head}`")),
        }
    }

    fn stmt(&self, s: &Sexp) -> Result<Stmt, ParseError> {
        if let Sexp::Atom(a, l) = s {
            return if a == "skip" {
                Ok(Stmt::Skip)
            } else {
                err(*l, format!("expected a statement, got `{a}`"))
            };
        }
        let (head, rest) = form(s)?;
        let name = |i: usize| -> Result<String, ParseError> { Ok(atom(&rest[i])?.to_owned()) };
        match head {
            ":=" => {
                arity(s, rest, 2)?;
                Ok(Stmt::Assign(name(0)?, self.expr(&rest[1])?))
            }
            "set" => {
                arity(s, rest, 2)?;
                Ok(Stmt::SetField(name(0)?, self.expr(&rest[1])?))
            }
            "store" => {
                arity(s, rest, 2)?;
                Ok(Stmt::Store(name(0)?, self.expr(&rest[1])?))
            }
            "if" => {
                arity(s, rest, 3)?;
                Ok(Stmt::if_(self.value(&rest[0])?, self.stmt(&rest[1])?, self.stmt(&rest[2])?))
            }
            "seq" => Ok(Stmt::seq(rest.iter().map(|r| self.stmt(r)).collect::<Result<Vec<_>, _>>()?)),
            "create" => {
                arity(s, rest, 2)?;
                Ok(Stmt::Create(name(0)?, name(1)?))
            }
            "send" => {
                arity(s, rest, 3)?;
                Ok(Stmt::Send(self.value(&rest[0])?, self.value(&rest[1])?, self.value(&rest[2])?))
            }
            _ => err(s.line(), format!("unknown statement form `{head}`")),
        }
    }
}

fn class(s: &Sexp, rest: &[Sexp]) -> Result<ClassDef, ParseError> {
    let Some((name, sections)) = rest.split_first() else {
        return err(s.line(), "class needs a name");
    };
    let mut c = ClassDef {
        name: atom(name)?.to_owned(),
        persistent: BTreeMap::new(),
        volatile: BTreeMap::new(),
        locals: BTreeMap::new(),
        handler: Stmt::Skip,
    };
    let mut handler = None;
    for sec in sections {
        let (head, items) = form(sec)?;
        match head {
            "persistent" => c.persistent = bindings(items)?,
            "volatile" => c.volatile = bindings(items)?,
            "locals" => c.locals = bindings(items)?,
            "handler" => {
                arity(sec, items, 1)?;
                handler = Some(&items[0]);
            }
            _ => return err(sec.line(), format!("unknown class section `{head}`")),
        }
    }
    if let Some(h) = handler {
        c.handler = ClassScope { volatile: &c.volatile }.stmt(h)?;
    }
    Ok(c)
}

/// Parses and validates a program.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let top = read_all(text)?;
    let [root] = top.as_slice() else {
        return err(1, "expected exactly one (program ...) form");
    };
    let (head, items) = form(root)?;
    if head != "program" {
        return err(root.line(), "expected (program ...)");
    }
    let mut p = Program {
        classes: BTreeMap::new(),
        machines: BTreeMap::new(),
        events: Vec::new(),
    };
    for item in items {
        let (head, rest) = form(item)?;
        match head {
            "class" => {
                let c = class(item, rest)?;
                p.classes.insert(c.name.clone(), c);
            }
            "machines" => {
                for m in rest {
                    let pair = list(m)?;
                    if pair.len() != 2 {
                        return err(m.line(), "expected (id Class)");
                    }
                    p.machines.insert(int(&pair[0])?, atom(&pair[1])?.to_owned());
                }
            }
            "events" => {
                for e in rest {
                    let t = list(e)?;
                    if t.len() != 3 {
                        return err(e.line(), "expected (dest type payload)");
                    }
                    p.events.push((int(&t[0])?, int(&t[1])?, int(&t[2])?));
                }
            }
            _ => return err(item.line(), format!("unknown program section `{head}`")),
        }
    }
    p.validate()?;
    Ok(p)
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Var(x) | Value::Field(x) => f.write_str(x),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Val(v) => write!(f, "{v}"),
            Expr::Load(x) => write!(f, "(load {x})"),
            Expr::BinOp(op, a, b) => write!(f, "({} {a} {b})", op.symbol()),
            Expr::Star => f.write_str("star"),
        }
    }
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stmt::Skip => f.write_str("skip"),
            Stmt::Assign(x, e) => write!(f, "(:= {x} {e})"),
            Stmt::SetField(x, e) => write!(f, "(set {x} {e})"),
            Stmt::Store(x, e) => write!(f, "(store {x} {e})"),
            Stmt::If(v, a, b) => write!(f, "(if {v} {a} {b})"),
            Stmt::Seq(..) => {
                f.write_str("(seq")?;
                let mut cur = self;
                while let Stmt::Seq(a, b) = cur {
                    write!(f, " {a}")?;
                    cur = b;
                }
                write!(f, " {cur})")
            }
            Stmt::Create(x, c) => write!(f, "(create {x} {c})"),
            Stmt::Send(a, b, c) => write!(f, "(send {a} {b} {c})"),
        }
    }
}

fn write_bindings(out: &mut String, kw: &str, b: &BTreeMap<String, Int>) {
    if b.is_empty() {
        return;
    }
    let _ = write!(out, "\n    ({kw}");
    for (k, v) in b {
        let _ = write!(out, " ({k} {v})");
    }
    out.push(')');
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::from("(program");
        for c in self.classes.values() {
            let _ = write!(out, "\n  (class {}", c.name);
            write_bindings(&mut out, "persistent", &c.persistent);
            write_bindings(&mut out, "volatile", &c.volatile);
            write_bindings(&mut out, "locals", &c.locals);
            let _ = write!(out, "\n    (handler {}))", c.handler);
        }
        if !self.machines.is_empty() {
            out.push_str("\n  (machines");
            for (id, c) in &self.machines {
                let _ = write!(out, " ({id} {c})");
            }
            out.push(')');
        }
        if !self.events.is_empty() {
            out.push_str("\n  (events");
            for (d, t, p) in &self.events {
                let _ = write!(out, " ({d} {t} {p})");
            }
            out.push(')');
        }
        out.push(')');
        writeln!(f, "{out}")
    }
}
