//! Machine identities, events, machine classes and the handler context.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::codec::{from_bytes, to_bytes, Codec, CodecError};
use crate::storage::{StoreError, Transaction};

/// Event type reserved for machine-creation records.
pub const N_CREATE: u32 = u32::MAX;

/// Partition name of the distinguished environment id.
pub const ENV_PARTITION: &str = "env";

/// Map holding every machine's persistent fields.
pub(crate) const FIELDS_MAP: &str = "fields";
/// Persistent register holding a machine's current state name.
pub(crate) const STATE_FIELD: &str = "$state";

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RsmId {
    pub partition: String,
    pub counter: u64,
}

impl RsmId {
    pub fn new(partition: impl Into<String>, counter: u64) -> Self {
        RsmId {
            partition: partition.into(),
            counter,
        }
    }

    pub fn env() -> Self {
        RsmId::new(ENV_PARTITION, 0)
    }

    pub fn is_env(&self) -> bool {
        self.partition == ENV_PARTITION
    }
}

impl fmt::Debug for RsmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.partition, self.counter)
    }
}

impl fmt::Display for RsmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.partition, self.counter)
    }
}

impl std::str::FromStr for RsmId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (p, c) = s.rsplit_once('#').ok_or_else(|| format!("expected <partition>#<counter>, got `{s}`"))?;
        let counter = c.parse().map_err(|e| format!("bad counter in `{s}`: {e}"))?;
        Ok(RsmId::new(p, counter))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub source: RsmId,
    pub event_type: u32,
    pub payload: Vec<u8>,
}

impl Event {
    pub fn new(source: RsmId, event_type: u32, payload: Vec<u8>) -> Self {
        Event {
            source,
            event_type,
            payload,
        }
    }

    pub fn is_create(&self) -> bool {
        self.event_type == N_CREATE
    }

    /// The class name carried by a creation record.
    pub fn create_class(&self) -> Option<String> {
        self.is_create().then(|| from_bytes::<String>(&self.payload).ok()).flatten()
    }

    pub fn decode_payload<T: Codec>(&self) -> Result<T, CodecError> {
        from_bytes(&self.payload)
    }
}

impl Codec for Event {
    fn encode(&self, out: &mut Vec<u8>) {
        self.source.encode(out);
        self.event_type.encode(out);
        self.payload.encode(out);
    }
    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
        Ok(Event {
            source: RsmId::decode(buf)?,
            event_type: u32::decode(buf)?,
            payload: Vec::decode(buf)?,
        })
    }
}

/// An outbox entry: an event and where it goes. Creation records are
/// addressed to the id being created.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub dest: RsmId,
    pub event: Event,
}

impl Codec for Envelope {
    fn encode(&self, out: &mut Vec<u8>) {
        self.dest.encode(out);
        self.event.encode(out);
    }
    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
        Ok(Envelope {
            dest: RsmId::decode(buf)?,
            event: Event::decode(buf)?,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HandlerError {
    #[error("handler context used after the handler completed")]
    ContextClosed,
    #[error("unknown machine class `{0}`")]
    UnknownClass(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `{0}` is volatile; use the volatile accessors")]
    NotPersistent(String),
    #[error("field `{0}` is persistent; use load/store")]
    NotVolatile(String),
    #[error("field `{0}` is a register, not a map")]
    NotAMap(String),
    #[error("field `{0}` is a map, not a register")]
    NotARegister(String),
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("{0}")]
    App(String),
}

impl HandlerError {
    pub fn app(msg: impl Into<String>) -> Self {
        HandlerError::App(msg.into())
    }

    /// True when the error means the store went away rather than the
    /// handler misbehaving.
    pub fn is_store_failure(&self) -> bool {
        matches!(
            self,
            HandlerError::Store(StoreError::Crashed | StoreError::Closed | StoreError::Io(_))
        )
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("class `{class}`: start state `{state}` has no handlers table")]
    MissingStartState { class: String, state: String },
    #[error("class `{class}`: field `{field}` declared both persistent and volatile")]
    FieldClash { class: String, field: String },
    #[error("class `{class}`: field name `{field}` is reserved")]
    ReservedField { class: String, field: String },
    #[error("class `{0}` registered twice")]
    DuplicateClass(String),
}

pub type Handler = Arc<dyn Fn(&mut HandlerContext<'_>) -> Result<(), HandlerError> + Send + Sync>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FieldKind {
    /// A single value with its initial encoding.
    Register(Vec<u8>),
    /// A key/value map, initially empty.
    Map,
}

#[derive(Clone, Default)]
struct StateTable {
    handlers: BTreeMap<u32, Handler>,
    fallback: Option<Handler>,
}

#[derive(Clone)]
pub struct MachineClass {
    name: String,
    persistent: BTreeMap<String, FieldKind>,
    volatile: BTreeMap<String, FieldKind>,
    start_state: String,
    states: BTreeMap<String, StateTable>,
}

impl fmt::Debug for MachineClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MachineClass")
            .field("name", &self.name)
            .field("persistent", &self.persistent.keys().collect::<Vec<_>>())
            .field("volatile", &self.volatile.keys().collect::<Vec<_>>())
            .field("start_state", &self.start_state)
            .field("states", &self.states.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl MachineClass {
    pub fn builder(name: impl Into<String>) -> ClassBuilder {
        ClassBuilder {
            class: MachineClass {
                name: name.into(),
                persistent: BTreeMap::new(),
                volatile: BTreeMap::new(),
                start_state: String::new(),
                states: BTreeMap::new(),
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn start_state(&self) -> &str {
        &self.start_state
    }

    pub fn persistent_fields(&self) -> &BTreeMap<String, FieldKind> {
        &self.persistent
    }

    pub fn volatile_fields(&self) -> &BTreeMap<String, FieldKind> {
        &self.volatile
    }

    pub fn has_state(&self, state: &str) -> bool {
        self.states.contains_key(state)
    }

    pub fn states(&self) -> impl Iterator<Item = &str> {
        self.states.keys().map(String::as_str)
    }

    /// The handler for `event_type` in `state`, falling back to the state's
    /// catch-all handler.
    pub fn handler(&self, state: &str, event_type: u32) -> Option<&Handler> {
        let table = self.states.get(state)?;
        table.handlers.get(&event_type).or(table.fallback.as_ref())
    }

    pub fn initial_volatile(&self) -> VolatileState {
        VolatileState {
            fields: self
                .volatile
                .iter()
                .map(|(k, kind)| {
                    let v = match kind {
                        FieldKind::Register(init) => VolatileValue::Register(init.clone()),
                        FieldKind::Map => VolatileValue::Map(BTreeMap::new()),
                    };
                    (k.clone(), v)
                })
                .collect(),
        }
    }
}

pub struct ClassBuilder {
    class: MachineClass,
}

impl ClassBuilder {
    pub fn persistent<T: Codec>(mut self, field: &str, init: T) -> Self {
        self.class.persistent.insert(field.to_owned(), FieldKind::Register(to_bytes(&init)));
        self
    }

    pub fn persistent_map(mut self, field: &str) -> Self {
        self.class.persistent.insert(field.to_owned(), FieldKind::Map);
        self
    }

    pub fn volatile<T: Codec>(mut self, field: &str, init: T) -> Self {
        self.class.volatile.insert(field.to_owned(), FieldKind::Register(to_bytes(&init)));
        self
    }

    pub fn volatile_map(mut self, field: &str) -> Self {
        self.class.volatile.insert(field.to_owned(), FieldKind::Map);
        self
    }

    pub fn start(mut self, state: &str) -> Self {
        self.class.start_state = state.to_owned();
        self.class.states.entry(state.to_owned()).or_default();
        self
    }

    /// Declares a state with no handlers (events arriving there are ignored).
    pub fn state(mut self, state: &str) -> Self {
        self.class.states.entry(state.to_owned()).or_default();
        self
    }

    pub fn on<F>(mut self, state: &str, event_type: u32, f: F) -> Self
    where
        F: Fn(&mut HandlerContext<'_>) -> Result<(), HandlerError> + Send + Sync + 'static,
    {
        self.class
            .states
            .entry(state.to_owned())
            .or_default()
            .handlers
            .insert(event_type, Arc::new(f));
        self
    }

    /// Handles every event type in `state` that has no specific handler.
    pub fn on_any<F>(mut self, state: &str, f: F) -> Self
    where
        F: Fn(&mut HandlerContext<'_>) -> Result<(), HandlerError> + Send + Sync + 'static,
    {
        self.class.states.entry(state.to_owned()).or_default().fallback = Some(Arc::new(f));
        self
    }

    pub fn build(self) -> Result<MachineClass, ModelError> {
        let c = self.class;
        if !c.states.contains_key(&c.start_state) {
            return Err(ModelError::MissingStartState {
                class: c.name,
                state: c.start_state,
            });
        }
        for f in c.persistent.keys() {
            if c.volatile.contains_key(f) {
                return Err(ModelError::FieldClash {
                    class: c.name.clone(),
                    field: f.clone(),
                });
            }
        }
        for f in c.persistent.keys().chain(c.volatile.keys()) {
            if f.starts_with('$') {
                return Err(ModelError::ReservedField {
                    class: c.name.clone(),
                    field: f.clone(),
                });
            }
        }
        Ok(c)
    }
}

/// The program signature: every class that may be instantiated.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    classes: BTreeMap<String, Arc<MachineClass>>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn register(&mut self, class: MachineClass) -> Result<(), ModelError> {
        if self.classes.contains_key(class.name()) {
            return Err(ModelError::DuplicateClass(class.name().to_owned()));
        }
        self.classes.insert(class.name().to_owned(), Arc::new(class));
        Ok(())
    }

    pub fn with(mut self, class: MachineClass) -> Result<Self, ModelError> {
        self.register(class)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Arc<MachineClass>> {
        self.classes.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VolatileValue {
    Register(Vec<u8>),
    Map(BTreeMap<Vec<u8>, Vec<u8>>),
}

/// In-memory fields of one machine; lost on every crash.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VolatileState {
    pub fields: BTreeMap<String, VolatileValue>,
}

/// Something a handler asked to be observed by test monitors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Announcement {
    pub machine: RsmId,
    pub topic: String,
    pub payload: Vec<u8>,
}

/// Buffered effect of a handler, in program order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Send { dest: RsmId, event_type: u32, payload: Vec<u8> },
    Create { id: RsmId, class: String },
}

impl Output {
    pub fn into_envelope(self, source: &RsmId) -> Envelope {
        match self {
            Output::Send {
                dest,
                event_type,
                payload,
            } => Envelope {
                dest,
                event: Event::new(source.clone(), event_type, payload),
            },
            Output::Create { id, class } => Envelope {
                dest: id,
                event: Event::new(source.clone(), N_CREATE, to_bytes(&class)),
            },
        }
    }
}

/// Fresh-id and nondeterminism provider for a handler run.
pub trait ContextServices {
    fn fresh_id(&mut self, placement: Option<&str>) -> Result<RsmId, HandlerError>;
    fn next_random(&mut self) -> u64;
}

pub(crate) fn field_key(id: &RsmId, field: &str) -> Vec<u8> {
    let mut k = to_bytes(id);
    field.encode(&mut k);
    k.push(0);
    k
}

pub(crate) fn entry_prefix(id: &RsmId, field: &str) -> Vec<u8> {
    let mut k = to_bytes(id);
    field.encode(&mut k);
    k.push(1);
    k
}

/// Everything a handler can see and do. Persistent accesses go through the
/// handler's transaction; sends and creates are buffered until commit.
pub struct HandlerContext<'a> {
    self_id: &'a RsmId,
    event: &'a Event,
    class: &'a MachineClass,
    registry: &'a Registry,
    tx: &'a mut Transaction,
    volatile: &'a mut VolatileState,
    services: &'a mut dyn ContextServices,
    state: String,
    jump: Option<String>,
    halt: bool,
    live: bool,
    output: Vec<Output>,
    announcements: Vec<Announcement>,
}

/// What a handler left behind for the runtime to persist.
#[derive(Debug, Default)]
pub struct HandlerEffects {
    pub output: Vec<Output>,
    pub announcements: Vec<Announcement>,
    pub jump: Option<String>,
    pub halt: bool,
}

impl<'a> HandlerContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        self_id: &'a RsmId,
        event: &'a Event,
        class: &'a MachineClass,
        registry: &'a Registry,
        state: String,
        tx: &'a mut Transaction,
        volatile: &'a mut VolatileState,
        services: &'a mut dyn ContextServices,
    ) -> Self {
        HandlerContext {
            self_id,
            event,
            class,
            registry,
            tx,
            volatile,
            services,
            state,
            jump: None,
            halt: false,
            live: true,
            output: Vec::new(),
            announcements: Vec::new(),
        }
    }

    /// Ends the context and hands its buffered effects to the runtime.
    pub fn finish(mut self) -> HandlerEffects {
        self.live = false;
        HandlerEffects {
            output: std::mem::take(&mut self.output),
            announcements: std::mem::take(&mut self.announcements),
            jump: self.jump.take(),
            halt: self.halt,
        }
    }

    fn check_live(&self) -> Result<(), HandlerError> {
        if self.live {
            Ok(())
        } else {
            Err(HandlerError::ContextClosed)
        }
    }

    pub fn self_id(&self) -> &RsmId {
        self.self_id
    }

    pub fn event(&self) -> &Event {
        self.event
    }

    pub fn source(&self) -> &RsmId {
        &self.event.source
    }

    pub fn payload<T: Codec>(&self) -> Result<T, HandlerError> {
        Ok(self.event.decode_payload()?)
    }

    /// The state the machine was in when this handler started.
    pub fn current_state(&self) -> &str {
        &self.state
    }

    pub fn output(&self) -> &[Output] {
        &self.output
    }

    pub fn send(&mut self, dest: &RsmId, event_type: u32, payload: Vec<u8>) -> Result<(), HandlerError> {
        self.check_live()?;
        self.output.push(Output::Send {
            dest: dest.clone(),
            event_type,
            payload,
        });
        Ok(())
    }

    pub fn send_value<T: Codec>(&mut self, dest: &RsmId, event_type: u32, value: &T) -> Result<(), HandlerError> {
        self.send(dest, event_type, to_bytes(value))
    }

    pub fn create(&mut self, class: &str) -> Result<RsmId, HandlerError> {
        self.create_on(class, None)
    }

    /// Like [`create`](Self::create) with an optional partition placement
    /// hint.
    pub fn create_on(&mut self, class: &str, partition: Option<&str>) -> Result<RsmId, HandlerError> {
        self.check_live()?;
        if self.registry.get(class).is_none() {
            return Err(HandlerError::UnknownClass(class.to_owned()));
        }
        let id = self.services.fresh_id(partition)?;
        self.output.push(Output::Create {
            id: id.clone(),
            class: class.to_owned(),
        });
        Ok(id)
    }

    fn persistent_kind(&self, field: &str) -> Result<&FieldKind, HandlerError> {
        match self.class.persistent.get(field) {
            Some(k) => Ok(k),
            None if self.class.volatile.contains_key(field) => Err(HandlerError::NotPersistent(field.to_owned())),
            None => Err(HandlerError::UnknownField(field.to_owned())),
        }
    }

    fn persistent_register(&self, field: &str) -> Result<&[u8], HandlerError> {
        match self.persistent_kind(field)? {
            FieldKind::Register(init) => Ok(init),
            FieldKind::Map => Err(HandlerError::NotARegister(field.to_owned())),
        }
    }

    fn persistent_map(&self, field: &str) -> Result<(), HandlerError> {
        match self.persistent_kind(field)? {
            FieldKind::Map => Ok(()),
            FieldKind::Register(_) => Err(HandlerError::NotAMap(field.to_owned())),
        }
    }

    pub fn load_raw(&mut self, field: &str) -> Result<Vec<u8>, HandlerError> {
        self.check_live()?;
        let init = self.persistent_register(field)?.to_vec();
        Ok(self.tx.get(FIELDS_MAP, &field_key(self.self_id, field))?.unwrap_or(init))
    }

    pub fn load<T: Codec>(&mut self, field: &str) -> Result<T, HandlerError> {
        Ok(from_bytes(&self.load_raw(field)?)?)
    }

    pub fn store_raw(&mut self, field: &str, value: Vec<u8>) -> Result<(), HandlerError> {
        self.check_live()?;
        self.persistent_register(field)?;
        self.tx.set(FIELDS_MAP, &field_key(self.self_id, field), value)?;
        Ok(())
    }

    pub fn store<T: Codec>(&mut self, field: &str, value: &T) -> Result<(), HandlerError> {
        self.store_raw(field, to_bytes(value))
    }

    pub fn load_entry<K: Codec, V: Codec>(&mut self, field: &str, key: &K) -> Result<Option<V>, HandlerError> {
        self.check_live()?;
        self.persistent_map(field)?;
        let mut k = entry_prefix(self.self_id, field);
        key.encode(&mut k);
        match self.tx.get(FIELDS_MAP, &k)? {
            Some(v) => Ok(Some(from_bytes(&v)?)),
            None => Ok(None),
        }
    }

    pub fn store_entry<K: Codec, V: Codec>(&mut self, field: &str, key: &K, value: &V) -> Result<(), HandlerError> {
        self.check_live()?;
        self.persistent_map(field)?;
        let mut k = entry_prefix(self.self_id, field);
        key.encode(&mut k);
        self.tx.set(FIELDS_MAP, &k, to_bytes(value))?;
        Ok(())
    }

    pub fn remove_entry<K: Codec>(&mut self, field: &str, key: &K) -> Result<(), HandlerError> {
        self.check_live()?;
        self.persistent_map(field)?;
        let mut k = entry_prefix(self.self_id, field);
        key.encode(&mut k);
        self.tx.remove(FIELDS_MAP, &k)?;
        Ok(())
    }

    /// All entries of a persistent map field, in key-byte order.
    pub fn entries<K: Codec, V: Codec>(&mut self, field: &str) -> Result<Vec<(K, V)>, HandlerError> {
        self.check_live()?;
        self.persistent_map(field)?;
        let prefix = entry_prefix(self.self_id, field);
        self.tx
            .scan_prefix(FIELDS_MAP, &prefix)?
            .into_iter()
            .map(|(k, v)| Ok((from_bytes(&k[prefix.len()..])?, from_bytes(&v)?)))
            .collect()
    }

    fn volatile_value(&mut self, field: &str) -> Result<&mut VolatileValue, HandlerError> {
        if self.class.persistent.contains_key(field) {
            return Err(HandlerError::NotVolatile(field.to_owned()));
        }
        self.volatile
            .fields
            .get_mut(field)
            .ok_or_else(|| HandlerError::UnknownField(field.to_owned()))
    }

    pub fn get_volatile<T: Codec>(&mut self, field: &str) -> Result<T, HandlerError> {
        self.check_live()?;
        match self.volatile_value(field)? {
            VolatileValue::Register(v) => Ok(from_bytes(v)?),
            VolatileValue::Map(_) => Err(HandlerError::NotARegister(field.to_owned())),
        }
    }

    pub fn set_volatile<T: Codec>(&mut self, field: &str, value: &T) -> Result<(), HandlerError> {
        self.check_live()?;
        match self.volatile_value(field)? {
            VolatileValue::Register(v) => {
                *v = to_bytes(value);
                Ok(())
            }
            VolatileValue::Map(_) => Err(HandlerError::NotARegister(field.to_owned())),
        }
    }

    pub fn volatile_entry<K: Codec, V: Codec>(&mut self, field: &str, key: &K) -> Result<Option<V>, HandlerError> {
        self.check_live()?;
        match self.volatile_value(field)? {
            VolatileValue::Map(m) => m.get(&to_bytes(key)).map(|v| from_bytes(v)).transpose().map_err(Into::into),
            VolatileValue::Register(_) => Err(HandlerError::NotAMap(field.to_owned())),
        }
    }

    pub fn set_volatile_entry<K: Codec, V: Codec>(&mut self, field: &str, key: &K, value: &V) -> Result<(), HandlerError> {
        self.check_live()?;
        match self.volatile_value(field)? {
            VolatileValue::Map(m) => {
                m.insert(to_bytes(key), to_bytes(value));
                Ok(())
            }
            VolatileValue::Register(_) => Err(HandlerError::NotAMap(field.to_owned())),
        }
    }

    pub fn remove_volatile_entry<K: Codec>(&mut self, field: &str, key: &K) -> Result<(), HandlerError> {
        self.check_live()?;
        match self.volatile_value(field)? {
            VolatileValue::Map(m) => {
                m.remove(&to_bytes(key));
                Ok(())
            }
            VolatileValue::Register(_) => Err(HandlerError::NotAMap(field.to_owned())),
        }
    }

    pub fn volatile_entries<K: Codec, V: Codec>(&mut self, field: &str) -> Result<Vec<(K, V)>, HandlerError> {
        self.check_live()?;
        match self.volatile_value(field)? {
            VolatileValue::Map(m) => m
                .iter()
                .map(|(k, v)| Ok((from_bytes(k)?, from_bytes(v)?)))
                .collect(),
            VolatileValue::Register(_) => Err(HandlerError::NotAMap(field.to_owned())),
        }
    }

    /// Requests a state change, applied when the handler's transaction
    /// commits.
    pub fn jump(&mut self, state: &str) -> Result<(), HandlerError> {
        self.check_live()?;
        if !self.class.has_state(state) {
            return Err(HandlerError::UnknownState(state.to_owned()));
        }
        self.jump = Some(state.to_owned());
        Ok(())
    }

    /// The state a pending jump will move to, if any.
    pub fn pending_jump(&self) -> Option<&str> {
        self.jump.as_deref()
    }

    /// Halts this machine once the handler commits.
    pub fn halt(&mut self) -> Result<(), HandlerError> {
        self.check_live()?;
        self.halt = true;
        Ok(())
    }

    pub fn announce(&mut self, topic: &str, payload: Vec<u8>) -> Result<(), HandlerError> {
        self.check_live()?;
        self.announcements.push(Announcement {
            machine: self.self_id.clone(),
            topic: topic.to_owned(),
            payload,
        });
        Ok(())
    }

    pub fn random_u64(&mut self) -> u64 {
        self.services.next_random()
    }

    /// Uniform draw from `0..n`; `n` must be positive.
    pub fn random_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "random_below(0)");
        self.services.next_random() % n
    }

    pub fn random_bool(&mut self, p: f64) -> bool {
        ((self.services.next_random() >> 11) as f64 / (1u64 << 53) as f64) < p
    }
}
