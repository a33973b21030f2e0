//! Interpreter for the reliable state machine calculus: syntax, the local
//! and global small-step judgments with ghost traces, and mechanical
//! checkers for local equivalence, non-interference and failure
//! transparency.

pub mod check;
pub mod gen;
pub mod global;
pub mod local;
pub mod parse;
pub mod syntax;

pub use global::{GlobalConfig, GlobalRule, NotApplicable, Record};
pub use local::{LocalConfig, LocalRule, Nondet, Stuck, Tape};
pub use parse::{parse_program, ParseError};
pub use syntax::{BinOp, ClassDef, Ev, Expr, Int, Program, Stmt, Value};
