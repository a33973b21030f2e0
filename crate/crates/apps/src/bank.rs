//! Bank: account machines hold balances; broker machines move money
//! between them by withdrawing first and depositing second.

use std::sync::Arc;

use rsm_core::model::{MachineClass, Registry, RsmId};
use rsm_core::runtime::HostError;
use rsm_core::MachineHost;

pub const ACCOUNT: &str = "Account";
pub const BROKER: &str = "Broker";

/// To an account: `i64` opening deposit.
pub const OPEN: u32 = 1;
/// Broker to account: `(u64 transfer, i64 amount)`.
pub const WITHDRAW: u32 = 2;
pub const DEPOSIT: u32 = 3;
/// Account to broker: `(u64 transfer, bool ok)`.
pub const WITHDRAWN: u32 = 4;
/// `u64` transfer.
pub const DEPOSITED: u32 = 5;
/// Client to broker: `(RsmId from, RsmId to, i64 amount)`.
pub const TRANSFER: u32 = 6;
/// Broker to client: `(u64 transfer, bool done)`.
pub const TRANSFER_DONE: u32 = 7;
/// Reply to the client: `i64`.
pub const GET_BALANCE: u32 = 8;
pub const BALANCE: u32 = 9;

/// `(from, to, amount, withdrawn)`.
type Pending = (RsmId, RsmId, i64, bool);

pub fn account_class() -> MachineClass {
    MachineClass::builder(ACCOUNT)
        .persistent("balance", 0i64)
        .persistent_map("withdrawals")
        .persistent_map("deposits")
        .start("Open")
        .on("Open", OPEN, |ctx| {
            let b: i64 = ctx.payload()?;
            let old: i64 = ctx.load("balance")?;
            ctx.store("balance", &(old + b))
        })
        .on("Open", WITHDRAW, |ctx| {
            let (t, amount): (u64, i64) = ctx.payload()?;
            let from = ctx.source().clone();
            let b: i64 = ctx.load("balance")?;
            let ok = amount >= 0 && b >= amount;
            if ok {
                ctx.store("balance", &(b - amount))?;
                ctx.store_entry("withdrawals", &(from.clone(), t), &amount)?;
            }
            ctx.send_value(&from, WITHDRAWN, &(t, ok))
        })
        .on("Open", DEPOSIT, |ctx| {
            let (t, amount): (u64, i64) = ctx.payload()?;
            let from = ctx.source().clone();
            let key = (from.clone(), t);
            if ctx.load_entry::<_, i64>("deposits", &key)?.is_none() {
                let b: i64 = ctx.load("balance")?;
                ctx.store("balance", &(b + amount))?;
                ctx.store_entry("deposits", &key, &amount)?;
            }
            ctx.send_value(&from, DEPOSITED, &t)
        })
        .on("Open", GET_BALANCE, |ctx| {
            let b: i64 = ctx.load("balance")?;
            let from = ctx.source().clone();
            ctx.send_value(&from, BALANCE, &b)
        })
        .build()
        .expect("account class")
}

pub fn broker_class() -> MachineClass {
    MachineClass::builder(BROKER)
        .persistent("next", 0u64)
        .persistent_map("pending")
        .persistent_map("clients")
        .start("Run")
        .on("Run", TRANSFER, |ctx| {
            let (from, to, amount): (RsmId, RsmId, i64) = ctx.payload()?;
            let t = ctx.load::<u64>("next")? + 1;
            ctx.store("next", &t)?;
            let client = ctx.source().clone();
            ctx.store_entry("clients", &t, &client)?;
            ctx.store_entry("pending", &t, &(from.clone(), to, amount, false))?;
            ctx.send_value(&from, WITHDRAW, &(t, amount))
        })
        .on("Run", WITHDRAWN, |ctx| {
            let (t, ok): (u64, bool) = ctx.payload()?;
            let Some((from, to, amount, _)) = ctx.load_entry::<u64, Pending>("pending", &t)? else {
                return Ok(());
            };
            if ok {
                ctx.store_entry("pending", &t, &(from, to.clone(), amount, true))?;
                ctx.send_value(&to, DEPOSIT, &(t, amount))
            } else {
                ctx.remove_entry("pending", &t)?;
                let client: RsmId = ctx.load_entry("clients", &t)?.unwrap_or_else(RsmId::env);
                ctx.remove_entry("clients", &t)?;
                ctx.send_value(&client, TRANSFER_DONE, &(t, false))
            }
        })
        .on("Run", DEPOSITED, |ctx| {
            let t: u64 = ctx.payload()?;
            ctx.remove_entry("pending", &t)?;
            let client: RsmId = ctx.load_entry("clients", &t)?.unwrap_or_else(RsmId::env);
            ctx.remove_entry("clients", &t)?;
            ctx.send_value(&client, TRANSFER_DONE, &(t, true))
        })
        .build()
        .expect("broker class")
}

pub fn registry() -> Arc<Registry> {
    Arc::new(
        Registry::new()
            .with(account_class())
            .and_then(|r| r.with(broker_class()))
            .expect("distinct class names"),
    )
}

/// Money held by accounts plus money withdrawn for a transfer and not
/// yet deposited.
pub fn total_money(host: &MachineHost) -> Result<i64, String> {
    let mut total = 0;
    for id in host.machines() {
        if host.class_of(&id).as_deref() != Some(ACCOUNT) {
            continue;
        }
        let e = |e: HostError| e.to_string();
        total += host.read_field::<i64>(&id, "balance").map_err(e)?.unwrap_or(0);
        for (_, a) in host.read_entries::<(RsmId, u64), i64>(&id, "withdrawals").map_err(e)? {
            total += a;
        }
        for (_, a) in host.read_entries::<(RsmId, u64), i64>(&id, "deposits").map_err(e)? {
            total -= a;
        }
    }
    Ok(total)
}

/// Sum of account balances.
pub fn balances(host: &MachineHost) -> Result<i64, String> {
    let mut total = 0;
    for id in host.machines() {
        if host.class_of(&id).as_deref() == Some(ACCOUNT) {
            total += host.read_field::<i64>(&id, "balance").map_err(|e| e.to_string())?.unwrap_or(0);
        }
    }
    Ok(total)
}
