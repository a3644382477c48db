use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RLDD";
pub const VERSION: u8 = 1;
/// Fixed bytes before the payload.
pub const HEADER_LEN: usize = 18;
/// Largest payload accepted from the wire.
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    Params = 1,
    Grads = 2,
    AvgGrads = 3,
    Shutdown = 4,
    /// Small statistics averaged like gradients.
    Stats = 5,
    /// Parameter checksum (request) or verdict (reply).
    Checksum = 6,
}

impl MsgType {
    pub const ALL: [MsgType; 7] = [
        MsgType::Hello,
        MsgType::Params,
        MsgType::Grads,
        MsgType::AvgGrads,
        MsgType::Shutdown,
        MsgType::Stats,
        MsgType::Checksum,
    ];

    pub fn from_byte(b: u8) -> Result<Self> {
        Self::ALL
            .get(b as usize)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("unknown message type {b}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub rank: u32,
    pub payload: Vec<f32>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, rank: u32, payload: Vec<f32>) -> Self {
        Self {
            msg_type,
            rank,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&(4 * self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the fixed header; returns type, rank and payload byte length.
    fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(MsgType, u32, u64)> {
        if &h[..4] != MAGIC {
            return Err(Error::Protocol("bad magic".into()));
        }
        if h[4] != VERSION {
            return Err(Error::Protocol(format!("unsupported version {}", h[4])));
        }
        let t = MsgType::from_byte(h[5])?;
        let rank = u32::from_le_bytes(h[6..10].try_into().expect("4 bytes"));
        let len = u64::from_le_bytes(h[10..18].try_into().expect("8 bytes"));
        if len % 4 != 0 || len > MAX_PAYLOAD {
            return Err(Error::Protocol(format!("invalid payload length {len}")));
        }
        Ok((t, rank, len))
    }

    fn floats(bytes: &[u8]) -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| Error::Protocol("truncated header".into()))?;
        let (msg_type, rank, len) = Self::parse_header(header)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() as u64 != len {
            return Err(Error::Protocol(format!(
                "payload_len {len} but {} bytes follow",
                body.len()
            )));
        }
        Ok(Self {
            msg_type,
            rank,
            payload: Self::floats(body),
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let (msg_type, rank, len) = Self::parse_header(&header)?;
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body)?;
        Ok(Self {
            msg_type,
            rank,
            payload: Self::floats(&body),
        })
    }
}

/// FNV-1a over the little-endian bytes of `values`.
pub fn param_checksum(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// A 64-bit value carried as two f32 bit patterns.
pub fn u64_to_payload(x: u64) -> Vec<f32> {
    vec![f32::from_bits(x as u32), f32::from_bits((x >> 32) as u32)]
}

pub fn payload_to_u64(p: &[f32]) -> Result<u64> {
    match p {
        [lo, hi] => Ok(u64::from(lo.to_bits()) | (u64::from(hi.to_bits()) << 32)),
        _ => Err(Error::Protocol(format!("checksum payload of {} values", p.len()))),
    }
}
