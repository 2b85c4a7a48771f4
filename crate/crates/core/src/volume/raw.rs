//! The raw-v1 container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "HVOL"
//!      4     2  version (u16, = 1)
//!      6    12  dims nx, ny, nz (u32 each)
//!     18    12  spacing sx, sy, sz (f32 each, mm)
//!     30     2  flags (u16): bit 0 mask present, bit 1 binary payload
//!     32     -  payload
//! ```
//!
//! Scalar payload: `n` little-endian f32 values, then `n` mask bytes (0/1) when
//! bit 0 is set. Binary payload: `n` bytes (0/1) followed by the f32 threshold
//! that produced them. All integers and floats are little-endian.

use crate::error::{Error, Result};

use super::{voxel_count, Dims};

pub const RAW_MAGIC: &[u8; 4] = b"HVOL";
pub const RAW_HEADER_LEN: usize = 32;
const RAW_VERSION: u16 = 1;
const FLAG_MASK: u16 = 1;
const FLAG_BINARY: u16 = 1 << 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RawPayload {
    Scalar {
        data: Vec<f32>,
        mask: Option<Vec<bool>>,
    },
    Binary {
        bits: Vec<bool>,
        threshold: f32,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub payload: RawPayload,
}

pub fn encode_raw(record: &RawRecord) -> Vec<u8> {
    let n = voxel_count(record.dims);
    let flags = match &record.payload {
        RawPayload::Scalar { mask: Some(_), .. } => FLAG_MASK,
        RawPayload::Scalar { mask: None, .. } => 0,
        RawPayload::Binary { .. } => FLAG_BINARY,
    };
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 5 * n + 4);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    for d in record.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in record.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&flags.to_le_bytes());
    debug_assert_eq!(out.len(), RAW_HEADER_LEN);
    match &record.payload {
        RawPayload::Scalar { data, mask } => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(m) = mask {
                out.extend(m.iter().map(|&b| b as u8));
            }
        }
        RawPayload::Binary { bits, threshold } => {
            out.extend(bits.iter().map(|&b| b as u8));
            out.extend_from_slice(&threshold.to_le_bytes());
        }
    }
    out
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn bools(bytes: &[u8]) -> Result<Vec<bool>> {
    bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format("raw-v1", format!("mask byte {other}"))),
        })
        .collect()
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawRecord> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err(Error::format("raw-v1", "file shorter than header"));
    }
    if &bytes[0..4] != RAW_MAGIC {
        return Err(Error::format("raw-v1", "bad magic"));
    }
    let version = u16_at(bytes, 4);
    if version != RAW_VERSION {
        return Err(Error::format("raw-v1", format!("unknown version {version}")));
    }
    let dims = [
        u32_at(bytes, 6) as usize,
        u32_at(bytes, 10) as usize,
        u32_at(bytes, 14) as usize,
    ];
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format("raw-v1", format!("zero dimension {dims:?}")));
    }
    let spacing = [f32_at(bytes, 18), f32_at(bytes, 22), f32_at(bytes, 26)];
    let flags = u16_at(bytes, 30);
    if flags & !(FLAG_MASK | FLAG_BINARY) != 0 || flags == FLAG_MASK | FLAG_BINARY {
        return Err(Error::format("raw-v1", format!("bad flags {flags:#x}")));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("raw-v1", "dims overflow"))?;
    let body = &bytes[RAW_HEADER_LEN..];

    let payload = if flags & FLAG_BINARY != 0 {
        if body.len() != n + 4 {
            return Err(Error::format(
                "raw-v1",
                format!("binary payload of {} bytes for {n} voxels", body.len()),
            ));
        }
        RawPayload::Binary {
            bits: bools(&body[..n])?,
            threshold: f32_at(body, n),
        }
    } else {
        let has_mask = flags & FLAG_MASK != 0;
        let expect = 4 * n + if has_mask { n } else { 0 };
        if body.len() != expect {
            return Err(Error::format(
                "raw-v1",
                format!("payload of {} bytes, expected {expect}", body.len()),
            ));
        }
        let data = body[..4 * n].chunks_exact(4).map(|c| f32_at(c, 0)).collect();
        let mask = if has_mask {
            Some(bools(&body[4 * n..])?)
        } else {
            None
        };
        RawPayload::Scalar { data, mask }
    };
    Ok(RawRecord {
        dims,
        spacing,
        payload,
    })
}
