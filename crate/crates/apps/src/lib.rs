//! Example applications on reliable state machines: word count, the
//! PoolServer resource manager and a bank, plus the benchmark harness
//! behind the `rsm` command.

pub mod bank;
pub mod bench;
pub mod driver;
pub mod poolserver;
pub mod programs;
pub mod wordcount;
