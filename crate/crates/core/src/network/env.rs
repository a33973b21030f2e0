//! The environment's side of the delivery protocol.

use std::collections::BTreeMap;

use crate::codec::{to_bytes, Codec, CodecError};
use crate::model::{Event, RsmId, N_CREATE};

use super::wire::{FrameKind, WireFrame};

/// Counter-space offset for machines created by the environment.
pub const ENV_ID_BASE: u64 = 0xffff << 48;

/// Sends events (and creation requests) into the system with the same
/// sequence-number protocol machines use, under the reserved `env` sender.
/// Unacknowledged frames stay pending and are returned by
/// [`pending`](EnvClient::pending) for retransmission.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EnvClient {
    counters: BTreeMap<RsmId, u64>,
    next_id: u64,
    pending: BTreeMap<(RsmId, u64, bool), WireFrame>,
}

impl EnvClient {
    pub fn new() -> Self {
        EnvClient::default()
    }

    pub fn send(&mut self, dest: &RsmId, event_type: u32, payload: Vec<u8>) -> WireFrame {
        let seq = self.counters.entry(dest.clone()).or_insert(0);
        let frame = WireFrame {
            kind: FrameKind::Msg,
            sender: RsmId::env(),
            seq: *seq,
            dest: dest.clone(),
            event_type,
            payload,
        };
        *seq += 1;
        self.pending.insert((dest.clone(), frame.seq, false), frame.clone());
        frame
    }

    /// Allocates an id on `partition` and returns the creation request.
    pub fn create(&mut self, class: &str, partition: &str) -> (RsmId, WireFrame) {
        let id = RsmId::new(partition, ENV_ID_BASE | self.next_id);
        self.next_id += 1;
        let frame = WireFrame::message(RsmId::env(), 0, id.clone(), &Event::new(RsmId::env(), N_CREATE, to_bytes(&class)));
        self.pending.insert((id.clone(), 0, true), frame.clone());
        (id, frame)
    }

    /// Returns true if the ack matched a pending frame.
    pub fn on_ack(&mut self, ack: &WireFrame) -> bool {
        let key = (ack.dest.clone(), ack.seq, ack.event_type == N_CREATE);
        self.pending.remove(&key).is_some()
    }

    pub fn pending(&self) -> impl Iterator<Item = &WireFrame> {
        self.pending.values()
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn sent_to(&self, dest: &RsmId) -> u64 {
        self.counters.get(dest).copied().unwrap_or(0)
    }
}

impl Codec for EnvClient {
    fn encode(&self, out: &mut Vec<u8>) {
        self.counters.encode(out);
        self.next_id.encode(out);
        let frames: Vec<Vec<u8>> = self.pending.values().map(WireFrame::encode).collect();
        frames.encode(out);
    }

    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
        let counters = BTreeMap::decode(buf)?;
        let next_id = u64::decode(buf)?;
        let mut pending = BTreeMap::new();
        for raw in Vec::<Vec<u8>>::decode(buf)? {
            let (f, _) = WireFrame::decode(&raw).map_err(|_| CodecError::Tag(0xff))?;
            pending.insert((f.dest.clone(), f.seq, f.event_type == N_CREATE), f);
        }
        Ok(EnvClient {
            counters,
            next_id,
            pending,
        })
    }
}
