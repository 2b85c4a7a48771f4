//! Minimal single-file NIfTI-1 reader (uncompressed float32 / int16).

use crate::error::{Error, Result};

use super::{linear_index, Volume3D};

const HEADER_LEN: usize = 348;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, at: usize) -> i32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_bits(self.i32(at) as u32)
    }
}

pub fn read_nifti(bytes: &[u8]) -> Result<Volume3D> {
    let fmt = |r: String| Error::format("NIfTI-1", r);
    if bytes.len() < HEADER_LEN {
        return Err(fmt("file shorter than 348-byte header".into()));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(fmt(format!("sizeof_hdr is {le}"))),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(fmt("only single-file .nii (magic n+1) is supported".into()));
    }
    let r = Reader { bytes, big_endian };

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(fmt(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = r.i16(42 + 2 * a);
        if v < 1 {
            return Err(fmt(format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        if r.i16(42 + 2 * a) > 1 {
            return Err(fmt("volumes with more than three non-singleton axes".into()));
        }
    }

    let datatype = r.i16(70);
    let width = match datatype {
        DT_FLOAT32 => 4,
        DT_INT16 => 2,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let spacing = [r.f32(80).abs(), r.f32(84).abs(), r.f32(88).abs()];
    let spacing = spacing.map(|s| if s.is_finite() && s > 0.0 { s } else { 1.0 });
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_LEN as f32) {
        return Err(fmt(format!("vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let slope = r.f32(112);
    let inter = r.f32(116);
    let (slope, inter) = if slope != 0.0 && slope.is_finite() {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    } else {
        (1.0, 0.0)
    };

    let n = dims[0] * dims[1] * dims[2];
    let need = offset + n * width;
    if bytes.len() < need {
        return Err(fmt(format!(
            "payload truncated: {} bytes, need {need}",
            bytes.len()
        )));
    }
    let body = &r.bytes[offset..need];
    let mut data = vec![0.0f32; n];
    // NIfTI stores x fastest; we store z fastest.
    let mut src = 0usize;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let raw = match datatype {
                    DT_FLOAT32 => {
                        let b: [u8; 4] = body[src * 4..src * 4 + 4].try_into().unwrap();
                        if big_endian {
                            f32::from_be_bytes(b)
                        } else {
                            f32::from_le_bytes(b)
                        }
                    }
                    _ => {
                        let b = [body[src * 2], body[src * 2 + 1]];
                        (if big_endian {
                            i16::from_be_bytes(b)
                        } else {
                            i16::from_le_bytes(b)
                        }) as f32
                    }
                };
                data[linear_index(dims, i, j, k)] = raw * slope + inter;
                src += 1;
            }
        }
    }
    Volume3D::new(dims, data)?.with_spacing(spacing)
}
