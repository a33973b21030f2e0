//! Wire frames exchanged between partitions.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! [u32 length][u8 kind][u32 sender partition len][sender partition][u64 sender counter]
//! [u64 seq][u32 dest partition len][dest partition][u64 dest counter]
//! [u32 event type][u32 payload len][payload][u32 crc32c]
//! ```
//!
//! `length` counts the bytes after itself; the checksum covers all preceding
//! bytes of the frame. An ack echoes the sender, dest, seq and event type of
//! the message it acknowledges, with an empty payload.

use crate::codec::{take, Codec, CodecError};
use crate::model::{Event, RsmId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Msg = 0,
    Ack = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireFrame {
    pub kind: FrameKind,
    pub sender: RsmId,
    pub seq: u64,
    pub dest: RsmId,
    pub event_type: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("incomplete frame")]
    Incomplete,
    #[error("frame checksum mismatch")]
    BadChecksum,
    #[error("bad frame kind {0}")]
    BadKind(u8),
    #[error("malformed frame: {0}")]
    Malformed(#[from] CodecError),
}

impl WireFrame {
    pub fn message(sender: RsmId, seq: u64, dest: RsmId, event: &Event) -> Self {
        WireFrame {
            kind: FrameKind::Msg,
            sender,
            seq,
            dest,
            event_type: event.event_type,
            payload: event.payload.clone(),
        }
    }

    pub fn ack_for(&self) -> Self {
        WireFrame {
            kind: FrameKind::Ack,
            sender: self.sender.clone(),
            seq: self.seq,
            dest: self.dest.clone(),
            event_type: self.event_type,
            payload: Vec::new(),
        }
    }

    pub fn to_event(&self) -> Event {
        Event::new(self.sender.clone(), self.event_type, self.payload.clone())
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&[0; 4]);
        out.push(self.kind as u8);
        self.sender.encode(out);
        self.seq.encode(out);
        self.dest.encode(out);
        self.event_type.encode(out);
        self.payload.encode(out);
        let len = (out.len() - start - 4 + 4) as u32;
        out[start..start + 4].copy_from_slice(&len.to_le_bytes());
        let crc = crc32c::crc32c(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decodes one frame from the front of `buf`, returning it and the bytes
    /// consumed.
    pub fn decode(buf: &[u8]) -> Result<(WireFrame, usize), FrameError> {
        if buf.len() < 4 {
            return Err(FrameError::Incomplete);
        }
        let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
        let total = 4 + len;
        if len < 5 || buf.len() < total {
            return Err(FrameError::Incomplete);
        }
        let (covered, crc) = buf[..total].split_at(total - 4);
        if crc32c::crc32c(covered) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(FrameError::BadChecksum);
        }
        let mut body = &covered[4..];
        let kind = match take(&mut body, 1)?[0] {
            0 => FrameKind::Msg,
            1 => FrameKind::Ack,
            k => return Err(FrameError::BadKind(k)),
        };
        let frame = WireFrame {
            kind,
            sender: RsmId::decode(&mut body)?,
            seq: u64::decode(&mut body)?,
            dest: RsmId::decode(&mut body)?,
            event_type: u32::decode(&mut body)?,
            payload: Vec::decode(&mut body)?,
        };
        if !body.is_empty() {
            return Err(CodecError::Trailing(body.len()).into());
        }
        Ok((frame, total))
    }

    /// Identifies the logical transfer this frame belongs to, as seen by the
    /// sender: creation records and messages to the same id use separate
    /// sequence spaces.
    pub fn transfer_key(&self) -> (RsmId, RsmId, u64, bool) {
        (
            self.sender.clone(),
            self.dest.clone(),
            self.seq,
            self.event_type == crate::model::N_CREATE,
        )
    }
}

/// Frames travelling together from one partition to another.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packet {
    pub from: String,
    pub to: String,
    pub frames: Vec<WireFrame>,
}

impl Packet {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for f in &self.frames {
            f.encode_into(&mut out);
        }
        out
    }
}
