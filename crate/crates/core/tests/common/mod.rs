#![allow(dead_code)]

use std::sync::Arc;

use rsm_core::{HandlerError, MachineClass, Registry, RsmId};

pub const SETUP: u32 = 1;
pub const INJECT: u32 = 2;
pub const RELAY: u32 = 3;

/// A machine that checks per-sender sequence numbers on everything it
/// receives and forwards each environment event once to its successor.
pub fn relay_class() -> MachineClass {
    MachineClass::builder("Relay")
        .persistent("next", Option::<RsmId>::None)
        .persistent("sent", 0u64)
        .persistent("received", 0u64)
        .persistent("violations", 0u64)
        .persistent_map("last")
        .start("run")
        .on("run", SETUP, |ctx| {
            let next: RsmId = ctx.payload()?;
            ctx.store("next", &Some(next))
        })
        .on("run", INJECT, |ctx| {
            check_seq(ctx)?;
            let next: Option<RsmId> = ctx.load("next")?;
            let next = next.ok_or_else(|| HandlerError::app("not set up"))?;
            let sent: u64 = ctx.load::<u64>("sent")? + 1;
            ctx.store("sent", &sent)?;
            ctx.send_value(&next, RELAY, &sent)
        })
        .on("run", RELAY, check_seq)
        .build()
        .unwrap()
}

fn check_seq(ctx: &mut rsm_core::HandlerContext<'_>) -> Result<(), HandlerError> {
    let seq: u64 = ctx.payload()?;
    let src = ctx.source().clone();
    let last: u64 = ctx.load_entry("last", &src)?.unwrap_or(0);
    if seq != last + 1 {
        let v: u64 = ctx.load("violations")?;
        ctx.store("violations", &(v + 1))?;
    }
    ctx.store_entry("last", &src, &seq)?;
    let r: u64 = ctx.load("received")?;
    ctx.store("received", &(r + 1))
}

pub fn registry() -> Arc<Registry> {
    Arc::new(Registry::new().with(relay_class()).unwrap())
}
