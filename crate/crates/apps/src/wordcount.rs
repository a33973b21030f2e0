//! Word count: a main machine routes words by hash to `N` counting shards,
//! which report new per-shard maxima to a max machine, which reports new
//! global maxima to the environment.

use std::sync::Arc;

use rsm_core::model::{HandlerContext, HandlerError, MachineClass, Registry, RsmId};

pub const MAIN: &str = "WordCountMain";
pub const SHARD: &str = "WordCountMachine";
pub const MAX: &str = "MaxMachine";

/// To the main machine: `u32` shard count.
pub const INIT: u32 = 1;
/// `String` word.
pub const WORD: u32 = 2;
/// To a shard: `RsmId` of the max machine.
pub const TARGET: u32 = 3;
/// `(String word, u64 freq)`.
pub const WORD_FREQ: u32 = 4;

pub const DEFAULT_SHARDS: u32 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WordCountOptions {
    /// Keep the shards' frequency maps in volatile memory (incorrect).
    pub volatile_word_freq: bool,
    /// Route each occurrence with a fresh random salt (incorrect).
    pub unstable_routing: bool,
}

/// FNV-1a; stable across runs and platforms.
pub fn word_hash(word: &str) -> u64 {
    word.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn main_class(opts: WordCountOptions) -> MachineClass {
    MachineClass::builder(MAIN)
        .persistent("n", 0u32)
        .persistent_map("shards")
        .persistent("max", RsmId::env())
        .start("Init")
        .on("Init", INIT, |ctx| {
            let n: u32 = ctx.payload()?;
            if n == 0 {
                return Err(HandlerError::app("need at least one shard"));
            }
            let max = ctx.create(MAX)?;
            ctx.store("max", &max)?;
            ctx.store("n", &n)?;
            for i in 0..n {
                let id = ctx.create(SHARD)?;
                ctx.send_value(&id, TARGET, &max)?;
                ctx.store_entry("shards", &i, &id)?;
            }
            ctx.jump("Receive")
        })
        .on("Receive", WORD, move |ctx| {
            let word: String = ctx.payload()?;
            let n: u32 = ctx.load("n")?;
            let salt = if opts.unstable_routing { ctx.random_below(n as u64) } else { 0 };
            let i = ((word_hash(&word) + salt) % n as u64) as u32;
            let target: RsmId = ctx
                .load_entry("shards", &i)?
                .ok_or_else(|| HandlerError::app(format!("no shard {i}")))?;
            ctx.send_value(&target, WORD, &word)
        })
        .build()
        .expect("main class")
}

fn freq(ctx: &mut HandlerContext<'_>, volatile: bool, word: &String) -> Result<u64, HandlerError> {
    let f = if volatile {
        ctx.volatile_entry("freq", word)?
    } else {
        ctx.load_entry("freq", word)?
    };
    Ok(f.unwrap_or(0))
}

pub fn shard_class(opts: WordCountOptions) -> MachineClass {
    let b = MachineClass::builder(SHARD)
        .persistent("high", 0u64)
        .persistent("target", RsmId::env())
        .volatile("seen", 0u64);
    let b = if opts.volatile_word_freq {
        b.volatile_map("freq")
    } else {
        b.persistent_map("freq")
    };
    b.start("Init")
        .on("Init", TARGET, |ctx| {
            let t: RsmId = ctx.payload()?;
            ctx.store("target", &t)?;
            ctx.jump("DoCount")
        })
        .on("DoCount", WORD, move |ctx| {
            let seen = ctx.get_volatile::<u64>("seen")? + 1;
            ctx.set_volatile("seen", &seen)?;
            let word: String = ctx.payload()?;
            let f = freq(ctx, opts.volatile_word_freq, &word)? + 1;
            if opts.volatile_word_freq {
                ctx.set_volatile_entry("freq", &word, &f)?;
            } else {
                ctx.store_entry("freq", &word, &f)?;
            }
            if f > ctx.load::<u64>("high")? {
                ctx.store("high", &f)?;
                let t: RsmId = ctx.load("target")?;
                ctx.send_value(&t, WORD_FREQ, &(word, f))?;
            }
            Ok(())
        })
        .build()
        .expect("shard class")
}

pub fn max_class() -> MachineClass {
    MachineClass::builder(MAX)
        .persistent("high", 0u64)
        .start("DoCount")
        .on("DoCount", WORD_FREQ, |ctx| {
            let (word, f): (String, u64) = ctx.payload()?;
            if f > ctx.load::<u64>("high")? {
                ctx.store("high", &f)?;
                ctx.send_value(&RsmId::env(), WORD_FREQ, &(word, f))?;
            }
            Ok(())
        })
        .build()
        .expect("max class")
}

pub fn registry(opts: WordCountOptions) -> Arc<Registry> {
    let mut r = Registry::new();
    for c in [main_class(opts), shard_class(opts), max_class()] {
        r.register(c).expect("distinct class names");
    }
    Arc::new(r)
}
