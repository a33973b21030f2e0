//! Reliable state machines: actors whose input dequeue, persistent-state
//! updates and output enqueues commit atomically.
//!
//! - [`storage`]: transactional store of reliable queues and maps over a
//!   checksummed write-ahead log.
//! - [`model`]: ids, events, machine classes and the handler context.
//! - [`runtime`]: per-partition host running machines' event loops.
//! - [`network`]: wire format, transports and the environment client.
//! - [`sim`]: deterministic multi-partition simulation with fault injection.
//! - [`cluster`]: threaded in-process cluster.

pub mod cluster;
pub mod codec;
pub mod model;
pub mod network;
pub mod runtime;
pub mod sim;
pub mod storage;

pub use codec::{from_bytes, to_bytes, Codec, CodecError};
pub use model::{
    Announcement, Envelope, Event, HandlerContext, HandlerError, MachineClass, Output, Registry, RsmId, N_CREATE,
};
pub use runtime::{HostConfig, MachineHost};
pub use storage::{Store, StoreConfig, StoreError};
