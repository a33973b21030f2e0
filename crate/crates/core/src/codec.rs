//! Canonical payload encoding: little-endian integers, u32-length-prefixed
//! UTF-8 strings and sequences.

use std::collections::BTreeMap;

use crate::model::RsmId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("unexpected end of input: need {need} bytes, have {have}")]
    Eof { need: usize, have: usize },
    #[error("invalid utf-8 in string")]
    Utf8,
    #[error("invalid tag {0}")]
    Tag(u8),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

pub trait Codec: Sized {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError>;
}

pub fn to_bytes<T: Codec + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    value.encode(&mut out);
    out
}

/// Decodes a complete buffer; trailing bytes are an error.
pub fn from_bytes<T: Codec>(mut buf: &[u8]) -> Result<T, CodecError> {
    let v = T::decode(&mut buf)?;
    if !buf.is_empty() {
        return Err(CodecError::Trailing(buf.len()));
    }
    Ok(v)
}

pub(crate) fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], CodecError> {
    if buf.len() < n {
        return Err(CodecError::Eof { need: n, have: buf.len() });
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

macro_rules! int_codec {
    ($($t:ty),*) => {$(
        impl Codec for $t {
            fn encode(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
                let b = take(buf, std::mem::size_of::<$t>())?;
                Ok(<$t>::from_le_bytes(b.try_into().unwrap()))
            }
        }
    )*};
}

int_codec!(u8, u16, u32, u64, i32, i64);

impl Codec for bool {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(*self as u8);
    }
    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
        match take(buf, 1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(CodecError::Tag(t)),
        }
    }
}

impl Codec for () {
    fn encode(&self, _: &mut Vec<u8>) {}
    fn decode(_: &mut &[u8]) -> Result<Self, CodecError> {
        Ok(())
    }
}

impl Codec for String {
    fn encode(&self, out: &mut Vec<u8>) {
        self.as_str().encode(out)
    }
    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
        let n = u32::decode(buf)? as usize;
        let b = take(buf, n)?;
        std::str::from_utf8(b).map(str::to_owned).map_err(|_| CodecError::Utf8)
    }
}

impl Codec for &str {
    fn encode(&self, out: &mut Vec<u8>) {
        (self.len() as u32).encode(out);
        out.extend_from_slice(self.as_bytes());
    }
    fn decode(_: &mut &[u8]) -> Result<Self, CodecError> {
        unreachable!("borrowed strings are encode-only")
    }
}

impl<T: Codec> Codec for Vec<T> {
    fn encode(&self, out: &mut Vec<u8>) {
        (self.len() as u32).encode(out);
        for v in self {
            v.encode(out);
        }
    }
    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
        let n = u32::decode(buf)? as usize;
        let mut v = Vec::with_capacity(n.min(buf.len()));
        for _ in 0..n {
            v.push(T::decode(buf)?);
        }
        Ok(v)
    }
}

impl<K: Codec + Ord, V: Codec> Codec for BTreeMap<K, V> {
    fn encode(&self, out: &mut Vec<u8>) {
        (self.len() as u32).encode(out);
        for (k, v) in self {
            k.encode(out);
            v.encode(out);
        }
    }
    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
        let n = u32::decode(buf)? as usize;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let k = K::decode(buf)?;
            m.insert(k, V::decode(buf)?);
        }
        Ok(m)
    }
}

impl<T: Codec> Codec for Option<T> {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            None => out.push(0),
            Some(v) => {
                out.push(1);
                v.encode(out);
            }
        }
    }
    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
        match take(buf, 1)?[0] {
            0 => Ok(None),
            1 => Ok(Some(T::decode(buf)?)),
            t => Err(CodecError::Tag(t)),
        }
    }
}

macro_rules! tuple_codec {
    ($($n:ident),*) => {
        impl<$($n: Codec),*> Codec for ($($n,)*) {
            #[allow(non_snake_case)]
            fn encode(&self, out: &mut Vec<u8>) {
                let ($($n,)*) = self;
                $($n.encode(out);)*
            }
            fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
                Ok(($($n::decode(buf)?,)*))
            }
        }
    };
}

tuple_codec!(A, B);
tuple_codec!(A, B, C);
tuple_codec!(A, B, C, D);
tuple_codec!(A, B, C, D, E);
tuple_codec!(A, B, C, D, E, F);

impl Codec for RsmId {
    fn encode(&self, out: &mut Vec<u8>) {
        self.partition.as_str().encode(out);
        self.counter.encode(out);
    }
    fn decode(buf: &mut &[u8]) -> Result<Self, CodecError> {
        let partition = String::decode(buf)?;
        Ok(RsmId::new(partition, u64::decode(buf)?))
    }
}
