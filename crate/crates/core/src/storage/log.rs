//! Commit-record encoding and log scanning.
//!
//! Record layout (all integers little-endian):
//!
//! ```text
//! [u32 length][u64 tx id][op]*[u32 crc32c]
//! op = [u32 name len][name][u8 op code][u32 key len][key][u32 value len][value]
//! ```
//!
//! `length` counts every byte after the length field itself (tx id, ops and
//! checksum). The checksum covers every preceding byte of the record,
//! including the length field.

use std::fmt;

/// Fixed bytes in a record besides its ops: length, tx id, crc.
pub const RECORD_OVERHEAD: usize = 4 + 8 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpCode {
    CreateQueue = 1,
    Enqueue = 2,
    Dequeue = 3,
    DropQueue = 4,
    MapSet = 5,
    MapRemove = 6,
    DropMap = 7,
}

impl OpCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => OpCode::CreateQueue,
            2 => OpCode::Enqueue,
            3 => OpCode::Dequeue,
            4 => OpCode::DropQueue,
            5 => OpCode::MapSet,
            6 => OpCode::MapRemove,
            7 => OpCode::DropMap,
            _ => return None,
        })
    }
}

/// One mutation of one collection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogOp {
    pub collection: String,
    pub code: OpCode,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl LogOp {
    pub fn new(collection: &str, code: OpCode, key: Vec<u8>, value: Vec<u8>) -> Self {
        LogOp {
            collection: collection.to_owned(),
            code,
            key,
            value,
        }
    }

    fn encoded_len(&self) -> usize {
        4 + self.collection.len() + 1 + 4 + self.key.len() + 4 + self.value.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub tx_id: u64,
    pub ops: Vec<LogOp>,
}

impl LogRecord {
    pub fn encoded_len(&self) -> usize {
        RECORD_OVERHEAD + self.ops.iter().map(LogOp::encoded_len).sum::<usize>()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        let body_len = self.encoded_len() - 4;
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.extend_from_slice(&self.tx_id.to_le_bytes());
        for op in &self.ops {
            out.extend_from_slice(&(op.collection.len() as u32).to_le_bytes());
            out.extend_from_slice(op.collection.as_bytes());
            out.push(op.code as u8);
            out.extend_from_slice(&(op.key.len() as u32).to_le_bytes());
            out.extend_from_slice(&op.key);
            out.extend_from_slice(&(op.value.len() as u32).to_le_bytes());
            out.extend_from_slice(&op.value);
        }
        let crc = crc32c::crc32c(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }
}

/// Why scanning stopped before the end of the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Defect {
    /// The length prefix or the declared body runs past the end of input.
    Truncated,
    /// The record is complete but its checksum does not match.
    BadChecksum,
    /// Checksum matches but the op sequence cannot be parsed.
    Malformed(String),
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defect::Truncated => write!(f, "truncated record"),
            Defect::BadChecksum => write!(f, "checksum mismatch"),
            Defect::Malformed(why) => write!(f, "malformed record: {why}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordSpan {
    pub offset: usize,
    pub len: usize,
    pub record: LogRecord,
}

/// The first bad record found by [`dissect`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TailDefect {
    pub offset: usize,
    pub defect: Defect,
    /// True when the defective record extends to (or past) the end of input,
    /// i.e. it is the shape left behind by an interrupted append.
    pub at_tail: bool,
}

/// Result of walking a log buffer record by record.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dissection {
    pub records: Vec<RecordSpan>,
    pub defect: Option<TailDefect>,
}

impl Dissection {
    /// Number of bytes covered by valid records.
    pub fn valid_len(&self) -> usize {
        self.records.last().map_or(0, |r| r.offset + r.len)
    }
}

/// Walks `bytes` and splits it into valid records, stopping at the first
/// defect.
pub fn dissect(bytes: &[u8]) -> Dissection {
    let mut out = Dissection::default();
    let mut pos = 0;
    while pos < bytes.len() {
        match decode_at(bytes, pos) {
            Ok((record, len)) => {
                out.records.push(RecordSpan {
                    offset: pos,
                    len,
                    record,
                });
                pos += len;
            }
            Err((defect, end)) => {
                out.defect = Some(TailDefect {
                    offset: pos,
                    at_tail: end >= bytes.len(),
                    defect,
                });
                break;
            }
        }
    }
    out
}

/// Decodes the record at `pos`. On failure returns the defect and the offset
/// the record claimed to end at.
fn decode_at(bytes: &[u8], pos: usize) -> Result<(LogRecord, usize), (Defect, usize)> {
    let rest = &bytes[pos..];
    if rest.len() < 4 {
        return Err((Defect::Truncated, usize::MAX));
    }
    let body_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let total = 4usize.saturating_add(body_len);
    let end = pos.saturating_add(total);
    if body_len < 12 {
        return Err((Defect::Malformed(format!("length {body_len} too small")), end));
    }
    if rest.len() < total {
        return Err((Defect::Truncated, end));
    }
    let record = &rest[..total];
    let (covered, crc_bytes) = record.split_at(total - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32c::crc32c(covered) != stored {
        return Err((Defect::BadChecksum, end));
    }
    let tx_id = u64::from_le_bytes(covered[4..12].try_into().unwrap());
    let ops = decode_ops(&covered[12..]).map_err(|why| (Defect::Malformed(why), end))?;
    Ok((LogRecord { tx_id, ops }, total))
}

fn decode_ops(mut buf: &[u8]) -> Result<Vec<LogOp>, String> {
    fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], String> {
        if buf.len() < n {
            return Err(format!("need {n} bytes, have {}", buf.len()));
        }
        let (head, tail) = buf.split_at(n);
        *buf = tail;
        Ok(head)
    }
    fn take_len(buf: &mut &[u8]) -> Result<usize, String> {
        Ok(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()) as usize)
    }

    let mut ops = Vec::new();
    while !buf.is_empty() {
        let n = take_len(&mut buf)?;
        let name = std::str::from_utf8(take(&mut buf, n)?)
            .map_err(|e| format!("collection name: {e}"))?
            .to_owned();
        let code_byte = take(&mut buf, 1)?[0];
        let code = OpCode::from_u8(code_byte).ok_or_else(|| format!("op code {code_byte}"))?;
        let n = take_len(&mut buf)?;
        let key = take(&mut buf, n)?.to_vec();
        let n = take_len(&mut buf)?;
        let value = take(&mut buf, n)?.to_vec();
        ops.push(LogOp {
            collection: name,
            code,
            key,
            value,
        });
    }
    Ok(ops)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LogRecord {
        LogRecord {
            tx_id: 7,
            ops: vec![
                LogOp::new("q", OpCode::Enqueue, vec![], b"abc".to_vec()),
                LogOp::new("m", OpCode::MapSet, b"k".to_vec(), vec![1, 2]),
            ],
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = sample().encode();
        assert_eq!(bytes.len(), sample().encoded_len());
        // length excludes itself
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 7);
        // first op: name len 1, "q", code 2, key len 0, value len 3, "abc"
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'q');
        assert_eq!(bytes[17], OpCode::Enqueue as u8);
        assert_eq!(&bytes[18..22], &0u32.to_le_bytes());
        assert_eq!(&bytes[22..26], &3u32.to_le_bytes());
        assert_eq!(&bytes[26..29], b"abc");
        let n = bytes.len();
        let crc = u32::from_le_bytes(bytes[n - 4..].try_into().unwrap());
        assert_eq!(crc, crc32c::crc32c(&bytes[..n - 4]));
    }

    #[test]
    fn dissect_stops_at_torn_tail() {
        let mut buf = sample().encode();
        let first = buf.len();
        buf.extend(sample().encode());
        buf.truncate(buf.len() - 3);
        let d = dissect(&buf);
        assert_eq!(d.records.len(), 1);
        assert_eq!(d.valid_len(), first);
        let defect = d.defect.unwrap();
        assert_eq!(defect.offset, first);
        assert_eq!(defect.defect, Defect::Truncated);
        assert!(defect.at_tail);
    }

    #[test]
    fn flipped_bit_is_a_checksum_failure() {
        let mut buf = sample().encode();
        buf[20] ^= 0x40;
        let d = dissect(&buf);
        assert!(d.records.is_empty());
        assert_eq!(d.defect.unwrap().defect, Defect::BadChecksum);
    }

    #[test]
    fn empty_record_round_trips() {
        let rec = LogRecord { tx_id: 1, ops: vec![] };
        let d = dissect(&rec.encode());
        assert_eq!(d.records[0].record, rec);
        assert!(d.defect.is_none());
    }
}
