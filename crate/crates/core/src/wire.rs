//! Binary encoding of gradient messages, broadcasts and named tensors.
//!
//! All integers and floats are little-endian. A named-tensor list is
//!
//! ```text
//! count: u32
//! repeat count times:
//!     name_len: u32, name: [u8; name_len] (UTF-8)
//!     rank: u32, dims: [u64; rank]
//!     values: [f64; product(dims)]
//! ```
//!
//! A gradient message is `FNMSG1`, party id (u32), iteration (u64), phase
//! (u8, 0 = W, 1 = A), empty flag (u8), the tensor list, then the CRC32 of
//! the tensor-list bytes (u32). Broadcasts are `FNBRD1`, iteration (u64),
//! phase (u8), the tensor list, then its CRC32.

use crate::dp::Phase;
use crate::error::{Error, Result};
use crate::tensor::{GradientVector, NamedTensors, Tensor};

pub const MESSAGE_MAGIC: &[u8; 6] = b"FNMSG1";
pub const BROADCAST_MAGIC: &[u8; 6] = b"FNBRD1";

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub fn encode_tensors(tensors: &NamedTensors, out: &mut Vec<u8>) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Cursor over a byte slice with bounds-checked little-endian reads.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Decode(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.bytes(magic.len())?;
        if got != magic {
            return Err(Error::Decode(format!(
                "bad header: expected {:?}, got {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Decode(format!(
                "{} trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

pub fn decode_tensors(r: &mut Reader<'_>) -> Result<NamedTensors> {
    let count = r.u32()?;
    let mut out = NamedTensors::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Decode("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Decode(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = r.u64()? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::Decode(format!("tensor `{name}` size overflows")))?;
            shape.push(d);
        }
        if len.saturating_mul(8) > r.remaining() {
            return Err(Error::Decode(format!("tensor `{name}` truncated")));
        }
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Decode(format!("tensor `{name}`: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Decode(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

/// One party's privatized gradient for one phase of one iteration. The
/// payload holds parameter-shaped tensors only; there is no field that could
/// carry training examples.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage {
    pub party_id: u32,
    pub iteration: u64,
    pub phase: Phase,
    /// `None` when the party's Poisson subsample was empty.
    pub payload: Option<GradientVector>,
}

impl GradientMessage {
    pub fn is_empty(&self) -> bool {
        self.payload.is_none()
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        encode_tensors(
            self.payload.as_ref().unwrap_or(&NamedTensors::new()),
            &mut p,
        );
        p
    }

    pub fn checksum(&self) -> u32 {
        crc32(&self.payload_bytes())
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload_bytes();
        let mut out = Vec::with_capacity(payload.len() + 28);
        out.extend_from_slice(MESSAGE_MAGIC);
        out.extend_from_slice(&self.party_id.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.push(self.phase.code());
        out.push(u8::from(self.payload.is_none()));
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32(&payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MESSAGE_MAGIC)?;
        let party_id = r.u32()?;
        let iteration = r.u64()?;
        let phase = Phase::from_code(r.u8()?)?;
        let empty = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Decode(format!("bad empty flag {other}"))),
        };
        let start = r.position();
        let payload = decode_tensors(&mut r)?;
        let computed = crc32(&bytes[start..r.position()]);
        let stored = r.u32()?;
        r.finish()?;
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if empty && !payload.is_empty() {
            return Err(Error::Decode(
                "empty-flagged message carries a payload".into(),
            ));
        }
        Ok(Self {
            party_id,
            iteration,
            phase,
            payload: if empty { None } else { Some(payload) },
        })
    }
}

/// Server-to-party broadcast of the updated global W or A.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub iteration: u64,
    pub phase: Phase,
    pub values: NamedTensors,
}

impl Broadcast {
    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        encode_tensors(&self.values, &mut payload);
        let mut out = Vec::with_capacity(payload.len() + 23);
        out.extend_from_slice(BROADCAST_MAGIC);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.push(self.phase.code());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32(&payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(BROADCAST_MAGIC)?;
        let iteration = r.u64()?;
        let phase = Phase::from_code(r.u8()?)?;
        let start = r.position();
        let values = decode_tensors(&mut r)?;
        let computed = crc32(&bytes[start..r.position()]);
        let stored = r.u32()?;
        r.finish()?;
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(Self {
            iteration,
            phase,
            values,
        })
    }
}
