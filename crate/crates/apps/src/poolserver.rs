//! PoolServer: a pool manager (PM) machine per pool keeps a resource
//! manager (RM) machine per resource, and the RMs talk to the resource
//! provider.

use std::sync::Arc;

use rsm_core::model::{HandlerContext, HandlerError, MachineClass, Registry, RsmId};
use rsm_core::MachineHost;
use rsm_testkit::mock::{self, MockConfig};

pub const PM: &str = "PoolManager";
pub const RM: &str = "ResourceManager";

/// Client to PM: `(u64 size, RsmId provider)`.
pub const CREATE_POOL: u32 = 10;
/// `i64` size.
pub const RESIZE_POOL: u32 = 11;
pub const DELETE_POOL: u32 = 12;
pub const GET_POOL: u32 = 13;
/// Ask every created resource for its health.
pub const HEALTH_TICK: u32 = 14;
/// RM to PM.
pub const RESOURCE_CREATED: u32 = 20;
pub const RESOURCE_DELETED: u32 = 21;
/// PM to client: `u64` size, sent on entering `Created`.
pub const POOL_READY: u32 = 30;
pub const POOL_DELETED: u32 = 31;
/// [`PoolInfo`].
pub const POOL_INFO: u32 = 32;
/// `String` reason.
pub const CLIENT_ERROR: u32 = 33;
/// PM to RM: `(RsmId pm, RsmId provider)`.
pub const CREATE_RESOURCE: u32 = 40;
pub const DELETE_RESOURCE: u32 = 41;
pub const CHECK_HEALTH: u32 = 42;

/// Announced after every scale operation: `(desired, creating, created)`.
pub const TOPIC_SCALED: &str = "scaled";
/// Announced after every PM handler: [`PoolInfo`].
pub const TOPIC_POOL: &str = "pool";

const CREATE: &str = "Create";
const DELETE: &str = "Delete";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoolOptions {
    /// ScaleUp forgets to count resources under creation (incorrect).
    pub no_creating_count: bool,
    /// CreatedCount lives in volatile memory (incorrect).
    pub volatile_created_count: bool,
    pub mock: MockConfig,
}

/// `(state, goal state, goal count, creating, created, deleting)`.
pub type PoolInfo = (String, String, u64, i64, i64, i64);

struct Pm<'c, 'a> {
    ctx: &'c mut HandlerContext<'a>,
    opts: PoolOptions,
}

impl Pm<'_, '_> {
    fn counter(&mut self, name: &str) -> Result<i64, HandlerError> {
        if name == "created" && self.opts.volatile_created_count {
            self.ctx.get_volatile(name)
        } else {
            self.ctx.load(name)
        }
    }

    fn add(&mut self, name: &str, d: i64) -> Result<(), HandlerError> {
        let v = self.counter(name)? + d;
        if name == "created" && self.opts.volatile_created_count {
            self.ctx.set_volatile(name, &v)
        } else {
            self.ctx.store(name, &v)
        }
    }

    fn desired(&mut self) -> Result<i64, HandlerError> {
        if self.ctx.load::<String>("goal_state")? == DELETE {
            Ok(0)
        } else {
            Ok(self.ctx.load::<u64>("goal_count")? as i64)
        }
    }

    fn info(&mut self) -> Result<PoolInfo, HandlerError> {
        Ok((
            self.ctx.current_state().to_owned(),
            self.ctx.load("goal_state")?,
            self.ctx.load("goal_count")?,
            self.counter("creating")?,
            self.counter("created")?,
            self.counter("deleting")?,
        ))
    }

    fn scale_up(&mut self, to_create: i64) -> Result<(), HandlerError> {
        let me = self.ctx.self_id().clone();
        let provider: RsmId = self.ctx.load("provider")?;
        for _ in 0..to_create {
            let id = self.ctx.create(RM)?;
            self.ctx.send_value(&id, CREATE_RESOURCE, &(me.clone(), provider.clone()))?;
            self.ctx.store_entry("table", &id, &"Creating".to_owned())?;
            if !self.opts.no_creating_count {
                self.add("creating", 1)?;
            }
        }
        Ok(())
    }

    fn scale_down(&mut self, to_delete: i64) -> Result<(), HandlerError> {
        let table: Vec<(RsmId, String)> = self.ctx.entries("table")?;
        let victims = table
            .iter()
            .filter(|(_, s)| s == "Creating")
            .chain(table.iter().filter(|(_, s)| s == "Created"))
            .take(to_delete as usize);
        for (id, s) in victims {
            self.ctx.send_value(id, DELETE_RESOURCE, &())?;
            self.ctx.store_entry("table", id, &"Deleting".to_owned())?;
            self.add(if s == "Creating" { "creating" } else { "created" }, -1)?;
            self.add("deleting", 1)?;
        }
        Ok(())
    }

    /// Issues the scale operation the goal calls for and moves to the
    /// matching state.
    fn reconcile(&mut self) -> Result<(), HandlerError> {
        let desired = self.desired()?;
        let have = self.counter("creating")? + self.counter("created")?;
        if have != desired {
            if have < desired {
                self.scale_up(desired - have)?;
            } else {
                self.scale_down(have - desired)?;
            }
            let now = (desired, self.counter("creating")?, self.counter("created")?);
            self.ctx.announce(TOPIC_SCALED, rsm_core::to_bytes(&now))?;
        }
        let client: RsmId = self.ctx.load("client")?;
        if self.ctx.load::<String>("goal_state")? == DELETE {
            if self.ctx.entries::<RsmId, String>("table")?.is_empty() {
                self.ctx.send_value(&client, POOL_DELETED, &())?;
                self.ctx.jump("Deleted")?;
                self.announce()?;
                return self.ctx.halt();
            }
            self.ctx.jump("Deleting")?;
        } else if self.counter("created")? == desired && self.counter("creating")? == 0 {
            if self.ctx.current_state() != "Created" {
                self.ctx.send_value(&client, POOL_READY, &(desired as u64))?;
                self.ctx.jump("Created")?;
            }
        } else {
            self.ctx.jump("Resizing")?;
        }
        self.announce()
    }

    fn announce(&mut self) -> Result<(), HandlerError> {
        let mut info = self.info()?;
        if let Some(next) = self.ctx.pending_jump() {
            info.0 = next.to_owned();
        }
        self.ctx.announce(TOPIC_POOL, rsm_core::to_bytes(&info))
    }
}

fn on_create_pool(ctx: &mut HandlerContext<'_>, opts: PoolOptions) -> Result<(), HandlerError> {
    let (size, provider): (u64, RsmId) = ctx.payload()?;
    let client = ctx.source().clone();
    ctx.store("client", &client)?;
    ctx.store("provider", &provider)?;
    ctx.store("goal_count", &size)?;
    ctx.store("goal_state", &CREATE.to_owned())?;
    Pm { ctx, opts }.reconcile()
}

fn on_resize(ctx: &mut HandlerContext<'_>, opts: PoolOptions) -> Result<(), HandlerError> {
    let n: i64 = ctx.payload()?;
    let from = ctx.source().clone();
    if n < 0 {
        return ctx.send_value(&from, CLIENT_ERROR, &format!("pool size must not be negative, got {n}"));
    }
    if ctx.load::<String>("goal_state")? == DELETE {
        return ctx.send_value(&from, CLIENT_ERROR, &"pool is being deleted".to_owned());
    }
    ctx.store("goal_count", &(n as u64))?;
    Pm { ctx, opts }.reconcile()
}

fn on_delete(ctx: &mut HandlerContext<'_>, opts: PoolOptions) -> Result<(), HandlerError> {
    ctx.store("goal_state", &DELETE.to_owned())?;
    Pm { ctx, opts }.reconcile()
}

fn on_get(ctx: &mut HandlerContext<'_>, opts: PoolOptions) -> Result<(), HandlerError> {
    let from = ctx.source().clone();
    let info = Pm { ctx, opts }.info()?;
    ctx.send_value(&from, POOL_INFO, &info)
}

fn on_health_tick(ctx: &mut HandlerContext<'_>) -> Result<(), HandlerError> {
    for (id, s) in ctx.entries::<RsmId, String>("table")? {
        if s == "Created" {
            ctx.send_value(&id, CHECK_HEALTH, &())?;
        }
    }
    Ok(())
}

fn on_resource_created(ctx: &mut HandlerContext<'_>, opts: PoolOptions) -> Result<(), HandlerError> {
    let rm = ctx.source().clone();
    if ctx.load_entry::<RsmId, String>("table", &rm)?.as_deref() == Some("Creating") {
        ctx.store_entry("table", &rm, &"Created".to_owned())?;
        let mut pm = Pm { ctx, opts };
        pm.add("creating", -1)?;
        pm.add("created", 1)?;
    }
    Pm { ctx, opts }.reconcile()
}

fn on_resource_deleted(ctx: &mut HandlerContext<'_>, opts: PoolOptions) -> Result<(), HandlerError> {
    let rm = ctx.source().clone();
    let state = ctx.load_entry::<RsmId, String>("table", &rm)?;
    ctx.remove_entry("table", &rm)?;
    let mut pm = Pm { ctx, opts };
    match state.as_deref() {
        Some("Deleting") => pm.add("deleting", -1)?,
        Some("Created") => pm.add("created", -1)?,
        Some("Creating") => pm.add("creating", -1)?,
        _ => {}
    }
    pm.reconcile()
}

pub fn pm_class(opts: PoolOptions) -> MachineClass {
    let mut b = MachineClass::builder(PM)
        .persistent("client", RsmId::env())
        .persistent("provider", RsmId::env())
        .persistent("creating", 0i64)
        .persistent("deleting", 0i64)
        .persistent("goal_count", 0u64)
        .persistent("goal_state", CREATE.to_owned())
        .persistent_map("table");
    b = if opts.volatile_created_count {
        b.volatile("created", 0i64)
    } else {
        b.persistent("created", 0i64)
    };
    b = b
        .start("Creating")
        .on("Creating", CREATE_POOL, move |ctx| on_create_pool(ctx, opts))
        .state("Deleted");
    for s in ["Creating", "Resizing", "Created", "Deleting"] {
        b = b.on(s, GET_POOL, move |ctx| on_get(ctx, opts)).on_any(s, |_| Ok(()));
    }
    for s in ["Resizing", "Created", "Deleting"] {
        b = b
            .on(s, RESIZE_POOL, move |ctx| on_resize(ctx, opts))
            .on(s, DELETE_POOL, move |ctx| on_delete(ctx, opts))
            .on(s, HEALTH_TICK, on_health_tick)
            .on(s, RESOURCE_CREATED, move |ctx| on_resource_created(ctx, opts))
            .on(s, RESOURCE_DELETED, move |ctx| on_resource_deleted(ctx, opts));
    }
    b.build().expect("pool manager class")
}

fn allocate(ctx: &mut HandlerContext<'_>) -> Result<(), HandlerError> {
    let provider: RsmId = ctx.load("provider")?;
    ctx.send_value(&provider, mock::ALLOCATE, &0u64)
}

fn release(ctx: &mut HandlerContext<'_>) -> Result<(), HandlerError> {
    let provider: RsmId = ctx.load("provider")?;
    let r: u64 = ctx.load("resource")?;
    ctx.send_value(&provider, mock::RELEASE, &r)?;
    ctx.jump("Deleting")
}

fn finish(ctx: &mut HandlerContext<'_>) -> Result<(), HandlerError> {
    let pm: RsmId = ctx.load("pm")?;
    ctx.send_value(&pm, RESOURCE_DELETED, &())?;
    ctx.jump("Deleted")?;
    ctx.halt()
}

fn deleting(ctx: &mut HandlerContext<'_>) -> Result<bool, HandlerError> {
    Ok(ctx.load::<String>("goal")? == DELETE)
}

pub fn rm_class() -> MachineClass {
    MachineClass::builder(RM)
        .persistent("pm", RsmId::env())
        .persistent("provider", RsmId::env())
        .persistent("goal", CREATE.to_owned())
        .persistent("resource", 0u64)
        .start("Creating")
        .state("Deleted")
        .on("Creating", CREATE_RESOURCE, |ctx| {
            let (pm, provider): (RsmId, RsmId) = ctx.payload()?;
            ctx.store("pm", &pm)?;
            ctx.store("provider", &provider)?;
            allocate(ctx)
        })
        .on("Creating", mock::ALLOCATED, |ctx| {
            let (_, r): (u64, u64) = ctx.payload()?;
            ctx.store("resource", &r)?;
            if deleting(ctx)? {
                return release(ctx);
            }
            let pm: RsmId = ctx.load("pm")?;
            ctx.send_value(&pm, RESOURCE_CREATED, &())?;
            ctx.jump("Created")
        })
        .on("Creating", mock::ALLOC_FAILED, |ctx| if deleting(ctx)? { finish(ctx) } else { allocate(ctx) })
        .on("Creating", DELETE_RESOURCE, |ctx| ctx.store("goal", &DELETE.to_owned()))
        .on("Created", DELETE_RESOURCE, |ctx| {
            ctx.store("goal", &DELETE.to_owned())?;
            release(ctx)
        })
        .on("Created", CHECK_HEALTH, |ctx| {
            let provider: RsmId = ctx.load("provider")?;
            let r: u64 = ctx.load("resource")?;
            ctx.send_value(&provider, mock::CHECK, &r)
        })
        .on("Created", mock::HEALTH, |ctx| {
            let (_, healthy): (u64, bool) = ctx.payload()?;
            if healthy {
                Ok(())
            } else {
                release(ctx)
            }
        })
        .on("Deleting", mock::RELEASED, finish)
        .on_any("Creating", |_| Ok(()))
        .on_any("Created", |_| Ok(()))
        .on_any("Deleting", |_| Ok(()))
        .build()
        .expect("resource manager class")
}

pub fn registry(opts: PoolOptions) -> Arc<Registry> {
    let mut r = Registry::new();
    for c in [pm_class(opts), rm_class(), mock::provider_class(opts.mock)] {
        r.register(c).expect("distinct class names");
    }
    Arc::new(r)
}

/// Every resource the provider holds belongs to exactly one live RM that
/// knows it, and every created RM holds a live resource.
pub fn check_garbage_free(host: &MachineHost, provider: &RsmId) -> Result<(), String> {
    let live = mock::live_resources(host, provider).map_err(|e| e.to_string())?;
    let mut owners = std::collections::BTreeSet::new();
    for (r, owner) in &live {
        if host.is_halted(owner) || host.class_of(owner).as_deref() != Some(RM) {
            return Err(format!("resource {r} is owned by {owner}, which is not a live resource manager"));
        }
        let held: Option<u64> = host.read_field(owner, "resource").map_err(|e| e.to_string())?;
        if held != Some(*r) {
            return Err(format!("resource {r} is allocated to {owner}, which holds {held:?}"));
        }
        if !owners.insert(owner.clone()) {
            return Err(format!("{owner} owns more than one resource"));
        }
    }
    for id in host.machines() {
        if host.class_of(&id).as_deref() == Some(RM) && host.current_state(&id).as_deref() == Some("Created") && !owners.contains(&id) {
            return Err(format!("{id} is Created but holds no live resource"));
        }
    }
    Ok(())
}
