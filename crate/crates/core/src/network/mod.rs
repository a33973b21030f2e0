//! Exact-once delivery between partitions: wire format, transports and the
//! environment client. The sender and receiver halves of the protocol live
//! on [`MachineHost`](crate::runtime::MachineHost) (`drain_*` and `ingest`).

pub mod env;
pub mod transport;
pub mod wire;

pub use env::EnvClient;
pub use transport::{FaultConfig, FaultyTransport, InProcessNetwork, TcpTransport, TransportStats};
pub use wire::{FrameKind, Packet, WireFrame};
