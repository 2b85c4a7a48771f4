//! Training patches: simple crops, multi-stride crops and coordinate channels.
//!
//! A multi-stride patch is cut from an `n·P` sub-volume by keeping every
//! `n`-th voxel, so a fixed-size tensor sees a wider field of view. Coordinate
//! channels always name the true full-volume position of each sampled voxel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edges::EdgeMap;
use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, Dims, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSamplerConfig {
    pub patch_size: usize,
    /// Probability that a patch is drawn by the multi-stride path.
    pub multistride_ratio: f64,
    /// Largest stride per axis; `None` means `floor(dim / P)`. Values above
    /// that bound are capped.
    pub max_multiple: Option<[usize; 3]>,
    /// Mirror each axis with probability 1/2.
    pub random_flips: bool,
    pub rng_seed: u64,
}

impl Default for PatchSamplerConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            multistride_ratio: 0.2,
            max_multiple: None,
            random_flips: true,
            rng_seed: 0,
        }
    }
}

impl PatchSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::InvalidParam(format!(
                "patch_size {} must be >= 2",
                self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.multistride_ratio) {
            return Err(Error::InvalidParam(format!(
                "multistride_ratio {} outside [0, 1]",
                self.multistride_ratio
            )));
        }
        if let Some(m) = self.max_multiple {
            if m.contains(&0) {
                return Err(Error::InvalidParam("max_multiple entries must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Effective per-axis stride bound for a volume of `dims`.
    pub fn multiples_for(&self, dims: Dims) -> [usize; 3] {
        let p = self.patch_size;
        let mut out = [0; 3];
        for a in 0..3 {
            let fit = (dims[a] / p).max(1);
            out[a] = self.max_multiple.map_or(fit, |m| m[a].min(fit));
        }
        out
    }
}

/// One training sample. Tensors are row-major over `shape` (z fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPatch {
    pub shape: Dims,
    pub data: Vec<f32>,
    pub edge: Vec<bool>,
    pub coords: [Vec<f32>; 3],
    pub origin: Dims,
    pub stride: Dims,
    /// Axes mirrored after sampling.
    pub flipped: [bool; 3],
    /// Drawn by the multi-stride path (possibly with unit stride).
    pub multistride: bool,
}

impl TrainingPatch {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Full-volume voxel that tensor index `m` was read from.
    pub fn source_index(&self, m: Dims) -> Dims {
        let mut out = [0; 3];
        for a in 0..3 {
            let mm = if self.flipped[a] {
                self.shape[a] - 1 - m[a]
            } else {
                m[a]
            };
            out[a] = self.origin[a] + self.stride[a] * mm;
        }
        out
    }

    pub fn edge_f32(&self) -> Vec<f32> {
        self.edge.iter().map(|&b| b as u8 as f32).collect()
    }

    /// Mirrors axis `axis`: tensors are reversed along it and the coordinate
    /// channel is negated, as if the whole volume had been mirrored.
    pub fn flip(&mut self, axis: usize) {
        let s = self.shape;
        let n = s[axis];
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let m = [i, j, k];
                    if m[axis] >= n / 2 {
                        continue;
                    }
                    let mut r = m;
                    r[axis] = n - 1 - m[axis];
                    let a = linear_index(s, m[0], m[1], m[2]);
                    let b = linear_index(s, r[0], r[1], r[2]);
                    self.data.swap(a, b);
                    self.edge.swap(a, b);
                    for c in &mut self.coords {
                        c.swap(a, b);
                    }
                }
            }
        }
        for c in &mut self.coords[axis] {
            *c = -*c;
        }
        self.flipped[axis] = !self.flipped[axis];
    }
}

/// Normalized position of voxel index `x` on an axis of length `dim`.
pub fn normalized_coord(x: usize, dim: usize) -> f32 {
    if dim <= 1 {
        0.0
    } else {
        (2.0 * x as f64 / (dim - 1) as f64 - 1.0) as f32
    }
}

fn check_bounds(dims: Dims, origin: Dims, stride: Dims, shape: Dims) -> Result<()> {
    for a in 0..3 {
        if shape[a] == 0 || stride[a] == 0 {
            return Err(Error::Shape(format!(
                "patch shape {shape:?} and stride {stride:?} must be positive"
            )));
        }
        if origin[a] + stride[a] * (shape[a] - 1) >= dims[a] {
            return Err(Error::Shape(format!(
                "patch at {origin:?} stride {stride:?} shape {shape:?} exceeds volume {dims:?}"
            )));
        }
    }
    Ok(())
}

/// Coordinate channels for a strided patch: channel `a` at tensor index `m`
/// holds `2·(origin[a] + stride[a]·m[a])/(dims[a] − 1) − 1`.
pub fn coord_channels(dims: Dims, origin: Dims, stride: Dims, shape: Dims) -> Result<[Vec<f32>; 3]> {
    check_bounds(dims, origin, stride, shape)?;
    let axis: Vec<Vec<f32>> = (0..3)
        .map(|a| {
            (0..shape[a])
                .map(|m| normalized_coord(origin[a] + stride[a] * m, dims[a]))
                .collect()
        })
        .collect();
    let n = voxel_count(shape);
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut idx = 0;
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                out[0][idx] = axis[0][i];
                out[1][idx] = axis[1][j];
                out[2][idx] = axis[2][k];
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Reads a strided patch; no interpolation.
pub fn extract_patch(
    v: &Volume3D,
    e: &EdgeMap,
    origin: Dims,
    stride: Dims,
    shape: Dims,
) -> Result<TrainingPatch> {
    let dims = v.dims();
    if e.dims() != dims {
        return Err(Error::Shape(format!(
            "edge map {:?} does not match volume {dims:?}",
            e.dims()
        )));
    }
    let coords = coord_channels(dims, origin, stride, shape)?;
    let n = voxel_count(shape);
    let mut data = Vec::with_capacity(n);
    let mut edge = Vec::with_capacity(n);
    let (src, bits) = (v.data(), e.bits());
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let at = linear_index(
                    dims,
                    origin[0] + stride[0] * i,
                    origin[1] + stride[1] * j,
                    origin[2] + stride[2] * k,
                );
                data.push(src[at]);
                edge.push(bits[at]);
            }
        }
    }
    Ok(TrainingPatch {
        shape,
        data,
        edge,
        coords,
        origin,
        stride,
        flipped: [false; 3],
        multistride: false,
    })
}

fn check_fits(dims: Dims, p: usize) -> Result<()> {
    if dims.iter().any(|&d| d < p) {
        return Err(Error::Shape(format!(
            "volume {dims:?} is smaller than patch size {p}"
        )));
    }
    Ok(())
}

pub fn sample_simple_patch(
    v: &Volume3D,
    e: &EdgeMap,
    cfg: &PatchSamplerConfig,
    rng: &mut impl Rng,
) -> Result<TrainingPatch> {
    cfg.validate()?;
    let (dims, p) = (v.dims(), cfg.patch_size);
    check_fits(dims, p)?;
    let origin = dims.map(|d| rng.random_range(0..=d - p));
    extract_patch(v, e, origin, [1; 3], [p; 3])
}

pub fn sample_multistride_patch(
    v: &Volume3D,
    e: &EdgeMap,
    cfg: &PatchSamplerConfig,
    rng: &mut impl Rng,
) -> Result<TrainingPatch> {
    cfg.validate()?;
    let (dims, p) = (v.dims(), cfg.patch_size);
    check_fits(dims, p)?;
    let max = cfg.multiples_for(dims);
    let mut stride = [1; 3];
    let mut origin = [0; 3];
    for a in 0..3 {
        stride[a] = rng.random_range(1..=max[a]);
        origin[a] = rng.random_range(0..=dims[a] - stride[a] * p);
    }
    let mut patch = extract_patch(v, e, origin, stride, [p; 3])?;
    patch.multistride = true;
    Ok(patch)
}

/// Draws `batch` patches: volume chosen uniformly, multi-stride with
/// probability `ρ`, then optional random axis flips.
pub fn sample_batch(
    volumes: &[Volume3D],
    edges: &[EdgeMap],
    cfg: &PatchSamplerConfig,
    rng: &mut impl Rng,
    batch: usize,
) -> Result<Vec<TrainingPatch>> {
    if volumes.is_empty() {
        return Err(Error::InvalidParam("no volumes to sample from".into()));
    }
    if volumes.len() != edges.len() {
        return Err(Error::Shape(format!(
            "{} volumes but {} edge maps",
            volumes.len(),
            edges.len()
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidParam("batch must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let s = rng.random_range(0..volumes.len());
        let multi = rng.random_bool(cfg.multistride_ratio);
        let mut patch = if multi {
            sample_multistride_patch(&volumes[s], &edges[s], cfg, rng)?
        } else {
            sample_simple_patch(&volumes[s], &edges[s], cfg, rng)?
        };
        if cfg.random_flips {
            for a in 0..3 {
                if rng.random_bool(0.5) {
                    patch.flip(a);
                }
            }
        }
        out.push(patch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: Dims) -> (Volume3D, EdgeMap) {
        let v = Volume3D::from_fn(dims, |i, j, k| (i * 10_000 + j * 100 + k) as f32).unwrap();
        let bits = (0..voxel_count(dims)).map(|i| i % 7 == 0).collect();
        (v, EdgeMap::new(dims, bits, 1.0).unwrap())
    }

    fn cfg(p: usize) -> PatchSamplerConfig {
        PatchSamplerConfig {
            patch_size: p,
            ..Default::default()
        }
    }

    #[test]
    fn full_extent_coordinates_hit_both_ends() {
        let c = coord_channels([5, 6, 7], [0; 3], [1; 3], [5, 6, 7]).unwrap();
        let last = voxel_count([5, 6, 7]) - 1;
        for ch in &c {
            assert_eq!(ch[0], -1.0);
            assert_eq!(ch[last], 1.0);
        }
    }

    #[test]
    fn odd_centre_is_zero() {
        assert_eq!(normalized_coord(4, 9), 0.0);
    }

    #[test]
    fn strided_coordinates_follow_formula() {
        let c = coord_channels([64; 3], [2; 3], [3; 3], [4; 3]).unwrap();
        for (m, x) in [2.0f64, 5.0, 8.0, 11.0].iter().enumerate() {
            let want = (2.0 * x / 63.0 - 1.0) as f32;
            assert_eq!(c[2][m], want);
            assert_eq!(c[0][linear_index([4; 3], m, 0, 0)], want);
        }
    }

    #[test]
    fn out_of_bounds_patch_is_rejected() {
        assert!(coord_channels([8; 3], [2, 0, 0], [2, 1, 1], [4; 3]).is_err());
        let (v, e) = ramp([4, 8, 8]);
        assert!(sample_simple_patch(&v, &e, &cfg(5), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn exact_size_volume_is_the_patch() {
        let (v, e) = ramp([6; 3]);
        let p = sample_simple_patch(&v, &e, &cfg(6), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(p.origin, [0; 3]);
        assert_eq!(p.data, v.data());
        assert_eq!(p.edge, e.bits());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (v, e) = ramp([20, 18, 16]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| sample_simple_patch(&v, &e, &cfg(4), &mut rng).unwrap().origin)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn unit_multiples_reduce_to_simple_sampling() {
        let (v, e) = ramp([12, 12, 12]);
        let c = PatchSamplerConfig {
            patch_size: 5,
            max_multiple: Some([1; 3]),
            ..Default::default()
        };
        let a = sample_multistride_patch(&v, &e, &c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.stride, [1; 3]);
    }

    #[test]
    fn stride_matches_sub_volume_multiples() {
        let (v, e) = ramp([128, 192, 64]);
        let c = cfg(64);
        assert_eq!(c.multiples_for(v.dims()), [2, 3, 1]);
        let p = extract_patch(&v, &e, [0; 3], [2, 3, 1], [64; 3]).unwrap();
        assert_eq!(p.shape, [64; 3]);
        assert_eq!(p.stride, [2, 3, 1]);
        assert_eq!(p.coords[0][voxel_count([64; 3]) - 1], normalized_coord(126, 128));
        assert_eq!(p.coords[1][voxel_count([64; 3]) - 1], normalized_coord(189, 192));
    }

    #[test]
    fn ratio_boundaries() {
        let (v, e) = ramp([16; 3]);
        let vols = vec![v];
        let edges = vec![e];
        for (rho, multi) in [(0.0, false), (1.0, true)] {
            let c = PatchSamplerConfig {
                patch_size: 4,
                multistride_ratio: rho,
                max_multiple: Some([4; 3]),
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let batch = sample_batch(&vols, &edges, &c, &mut rng, 200).unwrap();
            if multi {
                    assert!(batch.iter().all(|p| p.multistride));
                assert!(batch.iter().any(|p| p.stride != [1; 3]));
            } else {
                assert!(batch.iter().all(|p| !p.multistride && p.stride == [1; 3]));
            }
        }
    }

    #[test]
    fn multistride_fraction_matches_ratio() {
        let (v, e) = ramp([16; 3]);
        let vols = vec![v];
        let edges = vec![e];
        let c = PatchSamplerConfig {
            patch_size: 8,
            multistride_ratio: 0.2,
            max_multiple: Some([2; 3]),
            random_flips: false,
            rng_seed: 0,
        };
        let batch = sample_batch(&vols, &edges, &c, &mut ChaCha8Rng::seed_from_u64(21), 10_000).unwrap();
        let frac = batch.iter().filter(|p| p.multistride).count() as f64 / 1e4;
        assert!((frac - 0.2).abs() < 0.02, "{frac}");
        assert!(batch.iter().filter(|p| !p.multistride).all(|p| p.stride == [1; 3]));
    }

    #[test]
    fn flipping_twice_is_identity() {
        let (v, e) = ramp([10; 3]);
        let p = extract_patch(&v, &e, [1, 2, 0], [2, 1, 3], [4, 5, 3]).unwrap();
        let mut q = p.clone();
        q.flip(1);
        assert_ne!(q, p);
        q.flip(1);
        assert_eq!(q, p);
    }

    proptest! {
        #[test]
        fn provenance_holds_for_every_voxel(
            seed in any::<u64>(),
            dims in (6usize..20, 6usize..20, 6usize..20),
            p in 2usize..6,
            rho in 0.0f64..=1.0,
        ) {
            let dims = [dims.0, dims.1, dims.2];
            let (v, e) = ramp(dims);
            let c = PatchSamplerConfig { patch_size: p, multistride_ratio: rho, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for patch in sample_batch(&[v.clone()], &[e.clone()], &c, &mut rng, 4).unwrap() {
                let s = patch.shape;
                for i in 0..s[0] {
                    for j in 0..s[1] {
                        for k in 0..s[2] {
                            let m = linear_index(s, i, j, k);
                            let src = patch.source_index([i, j, k]);
                            let at = linear_index(dims, src[0], src[1], src[2]);
                            prop_assert_eq!(patch.data[m], v.data()[at]);
                            prop_assert_eq!(patch.edge[m], e.bits()[at]);
                            for a in 0..3 {
                                let c = normalized_coord(src[a], dims[a]);
                                let want = if patch.flipped[a] { -c } else { c };
                                prop_assert_eq!(patch.coords[a][m], want);
                                prop_assert!((-1.0..=1.0).contains(&patch.coords[a][m]));
                            }
                        }
                    }
                }
            }
        }
    }
}
