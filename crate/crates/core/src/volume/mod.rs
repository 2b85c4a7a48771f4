//! Dense 3D scalar volumes and the voxel-level operations shared by every
//! other stage: percentile normalization, index striding, threshold masks,
//! and file I/O.
//!
//! Storage is row-major over `(nx, ny, nz)`: voxel `(i, j, k)` lives at
//! `(i * ny + j) * nz + k`, so the last axis is contiguous.

mod nifti;
mod raw;

pub use nifti::read_nifti;
pub use raw::{decode_raw, encode_raw, RawPayload, RawRecord, RAW_HEADER_LEN, RAW_MAGIC};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

#[inline(always)]
pub fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// A dense scalar volume with voxel spacing and an optional boolean mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
    mask: Option<Vec<bool>>,
}

impl Volume3D {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {pos} is {}", data[pos])));
        }
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            data,
            mask: None,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::new(dims, vec![0.0; voxel_count(dims)]).expect("zero volume is valid")
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, data)
    }

    /// Builds a volume from f64 values, rounding to the storage type.
    pub fn from_f64(dims: Dims, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidParam(format!("spacing {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries, volume has {}",
                mask.len(),
                self.data.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[linear_index(self.dims, i, j, k)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Applies `f` voxelwise, keeping dims, spacing, and mask.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        let mut out = Self::new(self.dims, data)?;
        out.spacing = self.spacing;
        out.mask = self.mask.clone();
        Ok(out)
    }

    /// Same geometry and mask, new voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        let mut out = Self::new(self.dims, data)?;
        out.spacing = self.spacing;
        out.mask = self.mask.clone();
        Ok(out)
    }

    /// Copies the box `[origin, origin + size)`.
    pub fn crop(&self, origin: Dims, size: Dims) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::Shape(format!(
                    "crop {origin:?}+{size:?} outside {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(voxel_count(size));
        for i in 0..size[0] {
            for j in 0..size[1] {
                let start = linear_index(self.dims, origin[0] + i, origin[1] + j, origin[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        let mask = self.mask.as_ref().map(|m| {
            let mut out = Vec::with_capacity(voxel_count(size));
            for i in 0..size[0] {
                for j in 0..size[1] {
                    let start = linear_index(self.dims, origin[0] + i, origin[1] + j, origin[2]);
                    out.extend_from_slice(&m[start..start + size[2]]);
                }
            }
            out
        });
        Ok(Self {
            dims: size,
            spacing: self.spacing,
            data,
            mask,
        })
    }
}

/// Which on-disk format to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeFormat {
    RawV1,
    Nifti1,
}

impl VolumeFormat {
    /// Guesses from the extension: `.nii` is NIfTI-1, anything else raw-v1.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => VolumeFormat::Nifti1,
            _ => VolumeFormat::RawV1,
        }
    }
}

pub fn load_volume(path: impl AsRef<Path>, format: VolumeFormat) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        VolumeFormat::RawV1 => match decode_raw(&bytes)? {
            RawRecord {
                dims,
                spacing,
                payload: RawPayload::Scalar { data, mask },
            } => {
                let v = Volume3D::new(dims, data)?.with_spacing(spacing)?;
                match mask {
                    Some(m) => v.with_mask(m),
                    None => Ok(v),
                }
            }
            RawRecord {
                payload: RawPayload::Binary { .. },
                ..
            } => Err(Error::format(
                "raw-v1",
                "file holds a binary edge map, not a scalar volume",
            )),
        },
        VolumeFormat::Nifti1 => read_nifti(&bytes),
    }
}

/// Writes `v` as raw-v1.
pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let record = RawRecord {
        dims: v.dims,
        spacing: v.spacing,
        payload: RawPayload::Scalar {
            data: v.data.clone(),
            mask: v.mask.clone(),
        },
    };
    write_atomic(path.as_ref(), &encode_raw(&record))
}

/// Writes through a sibling temp file and renames over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Intensities at the two percentiles used for min-max scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub p_low: f64,
    pub p_high: f64,
    pub percentiles: (f64, f64),
}

impl NormalizationRecord {
    /// Maps normalized intensities back to the original scale (clamped tails
    /// are not recovered).
    pub fn invert(&self, v: &Volume3D) -> Result<Volume3D> {
        let span = self.p_high - self.p_low;
        v.map(|x| (x as f64 * span + self.p_low) as f32)
    }
}

/// Linear-interpolated percentile of already sorted values, `q` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile min-max normalization to [0, 1] with clamped tails.
pub fn normalize_percentile(
    v: &Volume3D,
    lo: f64,
    hi: f64,
) -> Result<(Volume3D, NormalizationRecord)> {
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || hi <= lo {
        return Err(Error::InvalidParam(format!(
            "percentiles ({lo}, {hi}) must satisfy 0 <= lo < hi <= 100"
        )));
    }
    let mut sorted = v.to_f64();
    sorted.sort_by(f64::total_cmp);
    let p_low = percentile_sorted(&sorted, lo);
    let p_high = percentile_sorted(&sorted, hi);
    if p_high <= p_low {
        return Err(Error::Degenerate(format!(
            "percentile range collapses ({p_low} .. {p_high})"
        )));
    }
    let span = p_high - p_low;
    let out = v.map(|x| ((x as f64 - p_low) / span).clamp(0.0, 1.0) as f32)?;
    Ok((
        out,
        NormalizationRecord {
            p_low,
            p_high,
            percentiles: (lo, hi),
        },
    ))
}

/// Keeps every `stride`-th voxel per axis, starting at index 0.
pub fn index_downsample(v: &Volume3D, stride: Dims) -> Result<Volume3D> {
    let dims = v.dims();
    for a in 0..3 {
        if stride[a] == 0 || dims[a] % stride[a] != 0 {
            return Err(Error::Shape(format!(
                "dims {dims:?} not divisible by stride {stride:?}"
            )));
        }
    }
    let out_dims = [dims[0] / stride[0], dims[1] / stride[1], dims[2] / stride[2]];
    let pick = |i: usize, j: usize, k: usize| {
        linear_index(dims, i * stride[0], j * stride[1], k * stride[2])
    };
    let mut data = Vec::with_capacity(voxel_count(out_dims));
    let mut mask = v.mask().map(|_| Vec::with_capacity(voxel_count(out_dims)));
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                let idx = pick(i, j, k);
                data.push(v.data[idx]);
                if let (Some(out), Some(src)) = (mask.as_mut(), v.mask()) {
                    out.push(src[idx]);
                }
            }
        }
    }
    let sp = v.spacing();
    let spacing = [
        sp[0] * stride[0] as f32,
        sp[1] * stride[1] as f32,
        sp[2] * stride[2] as f32,
    ];
    let out = Volume3D::new(out_dims, data)?.with_spacing(spacing)?;
    match mask {
        Some(m) => out.with_mask(m),
        None => Ok(out),
    }
}

/// Voxels brighter than `frac` times the volume maximum.
pub fn threshold_mask(v: &Volume3D, frac: f64) -> Result<Vec<bool>> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidParam(format!("mask fraction {frac} not in (0,1)")));
    }
    let cut = frac * v.max() as f64;
    Ok(v.data().iter().map(|&x| x as f64 > cut).collect())
}
