//! A mock cloud resource provider for testing resource managers.
//!
//! Requests and replies are ordinary events; failures and health are drawn
//! through the handler's random source so they replay exactly after a
//! crash.

use rsm_core::model::{MachineClass, RsmId};
use rsm_core::runtime::HostError;
use rsm_core::MachineHost;

pub const CLASS: &str = "MockProvider";

/// `u64` request tag.
pub const ALLOCATE: u32 = 100;
/// `u64` resource.
pub const RELEASE: u32 = 101;
/// `u64` resource.
pub const CHECK: u32 = 102;
/// `(u64 tag, u64 resource)`.
pub const ALLOCATED: u32 = 110;
/// `u64` tag.
pub const ALLOC_FAILED: u32 = 111;
/// `u64` resource.
pub const RELEASED: u32 = 112;
/// `(u64 resource, bool healthy)`.
pub const HEALTH: u32 = 113;

const NEXT: &str = "next";
const LIVE: &str = "live";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MockConfig {
    pub fail_probability: f64,
    pub unhealthy_probability: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            fail_probability: 0.1,
            unhealthy_probability: 0.02,
        }
    }
}

pub fn provider_class(config: MockConfig) -> MachineClass {
    MachineClass::builder(CLASS)
        .persistent(NEXT, 0u64)
        .persistent_map(LIVE)
        .start("Serving")
        .on("Serving", ALLOCATE, move |ctx| {
            let tag: u64 = ctx.payload()?;
            let from = ctx.source().clone();
            if ctx.random_bool(config.fail_probability) {
                return ctx.send_value(&from, ALLOC_FAILED, &tag);
            }
            let r = ctx.load::<u64>(NEXT)? + 1;
            ctx.store(NEXT, &r)?;
            ctx.store_entry(LIVE, &r, &from)?;
            ctx.send_value(&from, ALLOCATED, &(tag, r))
        })
        .on("Serving", RELEASE, |ctx| {
            let r: u64 = ctx.payload()?;
            let from = ctx.source().clone();
            ctx.remove_entry(LIVE, &r)?;
            ctx.send_value(&from, RELEASED, &r)
        })
        .on("Serving", CHECK, move |ctx| {
            let r: u64 = ctx.payload()?;
            let from = ctx.source().clone();
            let live = ctx.load_entry::<u64, RsmId>(LIVE, &r)?.is_some();
            let healthy = live && !ctx.random_bool(config.unhealthy_probability);
            ctx.send_value(&from, HEALTH, &(r, healthy))
        })
        .build()
        .expect("provider class is well formed")
}

/// Resources currently allocated, with their owners.
pub fn live_resources(host: &MachineHost, provider: &RsmId) -> Result<Vec<(u64, RsmId)>, HostError> {
    host.read_entries(provider, LIVE)
}
