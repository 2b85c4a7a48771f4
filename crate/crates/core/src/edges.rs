//! 3D Canny edge detection and the subject-level threshold search that pins
//! the fraction of edge voxels.
//!
//! The smoothing, gradient and non-maximum suppression stages do not depend
//! on the threshold, so [`adaptive_edge_detect`] runs them once and repeats
//! only the hysteresis pass while sweeping the threshold down.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{convolve_axis, gaussian_smooth};
use crate::volume::{
    decode_raw, encode_raw, linear_index, voxel_count, write_atomic, Dims, RawPayload, RawRecord,
    Volume3D,
};

/// Binary edge volume plus the statistics of the detection that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    dims: Dims,
    bits: Vec<bool>,
    edge_fraction: f64,
    threshold_used: f64,
}

impl EdgeMap {
    pub fn new(dims: Dims, bits: Vec<bool>, threshold_used: f64) -> Result<Self> {
        if bits.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} edge bits for dims {dims:?}",
                bits.len()
            )));
        }
        let edge_fraction = bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
        Ok(Self {
            dims,
            bits,
            edge_fraction,
            threshold_used,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn edge_fraction(&self) -> f64 {
        self.edge_fraction
    }

    pub fn threshold_used(&self) -> f64 {
        self.threshold_used
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Edge voxels as 1.0, everything else 0.0.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(
            self.dims,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("edge map dims are valid")
    }

    /// Fraction of shared edge voxels, |A ∩ B| / |A ∪ B|.
    pub fn jaccard(&self, other: &EdgeMap) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let record = RawRecord {
            dims: self.dims,
            spacing: [1.0; 3],
            payload: RawPayload::Binary {
                bits: self.bits.clone(),
                threshold: self.threshold_used as f32,
            },
        };
        write_atomic(path.as_ref(), &encode_raw(&record))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        match decode_raw(&bytes)? {
            RawRecord {
                dims,
                payload: RawPayload::Binary { bits, threshold },
                ..
            } => EdgeMap::new(dims, bits, threshold as f64),
            _ => Err(Error::format("raw-v1", "expected a binary edge payload")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CannyConfig {
    /// Gaussian pre-smoothing, in voxels.
    pub smoothing_sigma: f64,
    /// Low hysteresis threshold as a fraction of the high one.
    pub low_high_ratio: f64,
    pub target_fraction: f64,
    /// Threshold decrement per iteration; `None` means 1/256 of the start.
    pub decrement_step: Option<f64>,
    pub max_iterations: usize,
    /// Count the edge fraction inside the volume's mask instead of the
    /// whole field of view.
    pub fraction_within_mask: bool,
    /// Relative slack in the non-maximum test: a voxel survives when its
    /// magnitude is at least `(1 - nms_tolerance)` times each neighbour
    /// along the gradient direction.
    pub nms_tolerance: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            smoothing_sigma: 1.0,
            low_high_ratio: 0.4,
            target_fraction: 0.08,
            decrement_step: None,
            max_iterations: 256,
            fraction_within_mask: false,
            nms_tolerance: 0.0,
        }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.low_high_ratio > 0.0 && self.low_high_ratio < 1.0) {
            return Err(Error::InvalidParam(format!(
                "low_high_ratio {} not in (0,1)",
                self.low_high_ratio
            )));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return Err(Error::InvalidParam(format!(
                "target_fraction {} not in (0,1)",
                self.target_fraction
            )));
        }
        if !(self.smoothing_sigma >= 0.0) {
            return Err(Error::InvalidParam("smoothing_sigma < 0".into()));
        }
        if let Some(step) = self.decrement_step {
            if !(step > 0.0) {
                return Err(Error::InvalidParam(format!("decrement_step {step}")));
            }
        }
        Ok(())
    }
}

/// Per-axis gradient volumes.
#[derive(Clone, Debug)]
pub struct Gradient3 {
    pub gx: Volume3D,
    pub gy: Volume3D,
    pub gz: Volume3D,
}

// Sobel-style: central difference along the axis, [1 2 1]/4 across it.
const DERIV: [f64; 3] = [-0.5, 0.0, 0.5];
const SMOOTH: [f64; 3] = [0.25, 0.5, 0.25];

fn gradient_f64(src: &[f64], dims: Dims) -> Result<[Vec<f64>; 3]> {
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::Shape(format!(
            "gradient needs at least 3 voxels per axis, got {dims:?}"
        )));
    }
    let mut out: [Vec<f64>; 3] = Default::default();
    for (axis, slot) in out.iter_mut().enumerate() {
        let mut g = src.to_vec();
        for a in 0..3 {
            let taps: &[f64] = if a == axis { &DERIV } else { &SMOOTH };
            g = convolve_axis(&g, dims, a, taps);
        }
        *slot = g;
    }
    Ok(out)
}

pub fn gradient_3d(v: &Volume3D) -> Result<Gradient3> {
    let [gx, gy, gz] = gradient_f64(&v.to_f64(), v.dims())?;
    let to_vol = |g: Vec<f64>| Volume3D::from_f64(v.dims(), &g);
    Ok(Gradient3 {
        gx: to_vol(gx)?,
        gy: to_vol(gy)?,
        gz: to_vol(gz)?,
    })
}

/// The 13 undirected lattice directions of the 26-neighbourhood.
fn lattice_directions() -> Vec<([isize; 3], [f64; 3])> {
    let mut dirs = Vec::with_capacity(13);
    for dx in -1isize..=1 {
        for dy in -1isize..=1 {
            for dz in -1isize..=1 {
                let d = [dx, dy, dz];
                let first = d.iter().copied().find(|&c| c != 0);
                if first == Some(1) {
                    let norm = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    dirs.push((d, [dx as f64 / norm, dy as f64 / norm, dz as f64 / norm]));
                }
            }
        }
    }
    dirs
}

/// Gradient magnitude after smoothing, and the voxels that survive
/// non-maximum suppression along the quantized gradient direction.
struct Suppressed {
    magnitude: Vec<f64>,
    candidate: Vec<bool>,
    max_magnitude: f64,
}

fn suppress(v: &Volume3D, sigma: f64, tolerance: f64) -> Result<Suppressed> {
    let dims = v.dims();
    let smoothed = gaussian_smooth(&v.to_f64(), dims, sigma);
    let [gx, gy, gz] = gradient_f64(&smoothed, dims)?;
    let magnitude: Vec<f64> = (0..gx.len())
        .map(|i| (gx[i] * gx[i] + gy[i] * gy[i] + gz[i] * gz[i]).sqrt())
        .collect();
    let dirs = lattice_directions();
    let mag_at = |i: isize, j: isize, k: isize| -> f64 {
        if i < 0
            || j < 0
            || k < 0
            || i >= dims[0] as isize
            || j >= dims[1] as isize
            || k >= dims[2] as isize
        {
            0.0
        } else {
            magnitude[linear_index(dims, i as usize, j as usize, k as usize)]
        }
    };
    let mut candidate = vec![false; magnitude.len()];
    let mut max_magnitude = 0.0f64;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let idx = linear_index(dims, i, j, k);
                let m = magnitude[idx];
                if m <= 0.0 {
                    continue;
                }
                let g = [gx[idx] / m, gy[idx] / m, gz[idx] / m];
                let (step, _) = dirs
                    .iter()
                    .map(|(d, u)| (d, (g[0] * u[0] + g[1] * u[1] + g[2] * u[2]).abs()))
                    .fold((&dirs[0].0, -1.0), |best, cur| {
                        if cur.1 > best.1 {
                            cur
                        } else {
                            best
                        }
                    });
                let (i, j, k) = (i as isize, j as isize, k as isize);
                let ahead = mag_at(i + step[0], j + step[1], k + step[2]);
                let behind = mag_at(i - step[0], j - step[1], k - step[2]);
                let keep = if tolerance > 0.0 {
                    m >= (1.0 - tolerance) * ahead && m >= (1.0 - tolerance) * behind
                } else {
                    // Ties on a plateau keep only the voxel on the "behind" side.
                    m > ahead && m >= behind
                };
                if keep {
                    candidate[idx] = true;
                    max_magnitude = max_magnitude.max(m);
                }
            }
        }
    }
    Ok(Suppressed {
        magnitude,
        candidate,
        max_magnitude,
    })
}

/// Double-threshold hysteresis with 26-connectivity over NMS survivors.
fn hysteresis(s: &Suppressed, dims: Dims, high: f64, low: f64) -> Vec<bool> {
    let n = s.magnitude.len();
    let mut edge = vec![false; n];
    let mut stack = Vec::new();
    for idx in 0..n {
        if s.candidate[idx] && s.magnitude[idx] >= high {
            edge[idx] = true;
            stack.push(idx);
        }
    }
    let plane = dims[1] * dims[2];
    while let Some(idx) = stack.pop() {
        let i = idx / plane;
        let j = (idx / dims[2]) % dims[1];
        let k = idx % dims[2];
        for ni in i.saturating_sub(1)..=(i + 1).min(dims[0] - 1) {
            for nj in j.saturating_sub(1)..=(j + 1).min(dims[1] - 1) {
                for nk in k.saturating_sub(1)..=(k + 1).min(dims[2] - 1) {
                    let nidx = linear_index(dims, ni, nj, nk);
                    if !edge[nidx] && s.candidate[nidx] && s.magnitude[nidx] >= low {
                        edge[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
    }
    edge
}

/// Canny detection at a fixed high threshold.
pub fn canny_3d(v: &Volume3D, high: f64, cfg: &CannyConfig) -> Result<EdgeMap> {
    cfg.validate()?;
    if !(high > 0.0) {
        return Err(Error::InvalidParam(format!("high threshold {high} must be > 0")));
    }
    let s = suppress(v, cfg.smoothing_sigma, cfg.nms_tolerance)?;
    let bits = hysteresis(&s, v.dims(), high, cfg.low_high_ratio * high);
    EdgeMap::new(v.dims(), bits, high)
}

/// Maximum smoothed gradient magnitude over NMS survivors; the starting
/// threshold of the adaptive sweep.
pub fn max_gradient_magnitude(v: &Volume3D, cfg: &CannyConfig) -> Result<f64> {
    Ok(suppress(v, cfg.smoothing_sigma, cfg.nms_tolerance)?.max_magnitude)
}

/// Lowers the high threshold from the maximum gradient magnitude until the
/// edge fraction first reaches `cfg.target_fraction`.
pub fn adaptive_edge_detect(v: &Volume3D, cfg: &CannyConfig) -> Result<EdgeMap> {
    cfg.validate()?;
    let dims = v.dims();
    let s = suppress(v, cfg.smoothing_sigma, cfg.nms_tolerance)?;
    let counted: Option<&[bool]> = if cfg.fraction_within_mask {
        v.mask()
    } else {
        None
    };
    let denom = counted.map_or(v.len(), |m| m.iter().filter(|&&b| b).count());
    if denom == 0 {
        return Err(Error::Degenerate("empty mask for edge fraction".into()));
    }
    let fraction = |bits: &[bool]| -> f64 {
        let hits = match counted {
            Some(m) => bits.iter().zip(m).filter(|(&b, &m)| b && m).count(),
            None => bits.iter().filter(|&&b| b).count(),
        };
        hits as f64 / denom as f64
    };

    let start = s.max_magnitude;
    if start <= 0.0 {
        return Err(Error::Convergence {
            target: cfg.target_fraction,
            achieved: 0.0,
            iterations: 0,
        });
    }
    let step = cfg.decrement_step.unwrap_or(start / 256.0);
    let mut achieved = 0.0;
    for iter in 0..cfg.max_iterations {
        let high = start - iter as f64 * step;
        if high <= 0.0 {
            break;
        }
        let bits = hysteresis(&s, dims, high, cfg.low_high_ratio * high);
        achieved = fraction(&bits);
        if achieved >= cfg.target_fraction {
            return EdgeMap::new(dims, bits, high);
        }
    }
    Err(Error::Convergence {
        target: cfg.target_fraction,
        achieved,
        iterations: cfg.max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(n: usize, r: f64) -> Volume3D {
        let c = (n as f64 - 1.0) / 2.0;
        Volume3D::from_fn([n; 3], |i, j, k| {
            let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2))
                .sqrt();
            if d <= r {
                0.8
            } else {
                0.1
            }
        })
        .unwrap()
    }

    fn pseudo_random(dims: Dims, seed: u64) -> Volume3D {
        let mut s = seed;
        Volume3D::from_fn(dims, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
        .unwrap()
    }

    #[test]
    fn constant_volume_has_zero_gradient() {
        let g = gradient_3d(&Volume3D::new([4, 4, 4], vec![0.3; 64]).unwrap()).unwrap();
        for v in [&g.gx, &g.gy, &g.gz] {
            assert!(v.data().iter().all(|&x| x.abs() < 1e-7));
        }
    }

    #[test]
    fn ramp_gradient_along_x() {
        let v = Volume3D::from_fn([6, 5, 5], |i, _, _| i as f32).unwrap();
        let g = gradient_3d(&v).unwrap();
        for i in 1..5 {
            for j in 0..5 {
                for k in 0..5 {
                    assert!((g.gx.get(i, j, k) - 1.0).abs() < 1e-6);
                    assert_eq!(g.gy.get(i, j, k), 0.0);
                    assert_eq!(g.gz.get(i, j, k), 0.0);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_explicit_stencil() {
        let dims = [5, 5, 5];
        let v = pseudo_random(dims, 3);
        let g = gradient_3d(&v).unwrap();
        let at = |i: isize, j: isize, k: isize| {
            let c = |x: isize| x.clamp(0, 4) as usize;
            v.get(c(i), c(j), c(k)) as f64
        };
        let w = [0.25, 0.5, 0.25];
        for i in 0..5isize {
            for j in 0..5isize {
                for k in 0..5isize {
                    let mut gx = 0.0;
                    for (b, wb) in w.iter().enumerate() {
                        for (c, wc) in w.iter().enumerate() {
                            let (jj, kk) = (j + b as isize - 1, k + c as isize - 1);
                            gx += wb * wc * 0.5 * (at(i + 1, jj, kk) - at(i - 1, jj, kk));
                        }
                    }
                    let got = g.gx.get(i as usize, j as usize, k as usize) as f64;
                    assert!((got - gx).abs() < 1e-6, "({i},{j},{k}) {got} vs {gx}");
                }
            }
        }
    }

    #[test]
    fn gradient_needs_three_voxels() {
        assert!(gradient_3d(&Volume3D::zeros([2, 4, 4])).is_err());
    }

    #[test]
    fn zero_volume_has_no_edges() {
        let e = canny_3d(&Volume3D::zeros([8, 8, 8]), 0.1, &CannyConfig::default()).unwrap();
        assert_eq!(e.count(), 0);
        assert!(canny_3d(&Volume3D::zeros([8, 8, 8]), 0.0, &CannyConfig::default()).is_err());
    }

    #[test]
    fn threshold_above_max_is_empty() {
        let v = ball(20, 6.0);
        let cfg = CannyConfig::default();
        let max = max_gradient_magnitude(&v, &cfg).unwrap();
        assert_eq!(canny_3d(&v, max * (1.0 + 1e-9), &cfg).unwrap().count(), 0);
        assert!(canny_3d(&v, max, &cfg).unwrap().count() > 0);
    }

    #[test]
    fn ball_edges_form_a_shell() {
        let r = 7.0;
        let v = ball(24, r);
        let cfg = CannyConfig::default();
        let max = max_gradient_magnitude(&v, &cfg).unwrap();
        let e = canny_3d(&v, 0.3 * max, &cfg).unwrap();
        let c = 11.5;
        let mut near_surface = 0;
        let mut interior = 0;
        for i in 0..24 {
            for j in 0..24 {
                for k in 0..24 {
                    if !e.bits()[linear_index([24; 3], i, j, k)] {
                        continue;
                    }
                    let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)
                        + (k as f64 - c).powi(2))
                    .sqrt();
                    if (d - r).abs() <= 1.5 {
                        near_surface += 1;
                    }
                    if d < r - 2.0 {
                        interior += 1;
                    }
                }
            }
        }
        assert_eq!(interior, 0);
        assert_eq!(near_surface, e.count());
        // Closed: every ray from the centre crosses the shell band.
        assert!(e.count() as f64 > 0.8 * 4.0 * std::f64::consts::PI * r * r);
    }

    #[test]
    fn unreachable_target_fails_to_converge() {
        let v = ball(12, 3.0);
        let cfg = CannyConfig {
            target_fraction: 0.999,
            ..Default::default()
        };
        match adaptive_edge_detect(&v, &cfg) {
            Err(Error::Convergence { achieved, .. }) => assert!(achieved < 0.999),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn adaptive_is_deterministic_and_scale_covariant() {
        let v = pseudo_random([12, 12, 12], 9);
        let cfg = CannyConfig {
            target_fraction: 0.05,
            ..Default::default()
        };
        let a = adaptive_edge_detect(&v, &cfg).unwrap();
        let b = adaptive_edge_detect(&v, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.edge_fraction() >= 0.05);
        for gamma in [0.5f32, 2.0, 4.0] {
            let scaled = v.map(|x| gamma * x).unwrap();
            let e = adaptive_edge_detect(&scaled, &cfg).unwrap();
            assert_eq!(e.bits(), a.bits(), "gamma {gamma}");
        }
    }

    #[test]
    fn fraction_nonincreasing_in_threshold() {
        let v = pseudo_random([10, 10, 10], 1);
        let cfg = CannyConfig::default();
        let max = max_gradient_magnitude(&v, &cfg).unwrap();
        let mut prev = f64::INFINITY;
        for t in 1..=20 {
            let f = canny_3d(&v, max * t as f64 / 20.0, &cfg)
                .unwrap()
                .edge_fraction();
            assert!(f <= prev);
            prev = f;
        }
    }

    #[test]
    fn every_edge_connects_to_a_strong_voxel() {
        let v = pseudo_random([10, 10, 10], 5);
        let cfg = CannyConfig::default();
        let max = max_gradient_magnitude(&v, &cfg).unwrap();
        let high = 0.5 * max;
        let e = canny_3d(&v, high, &cfg).unwrap();
        let s = suppress(&v, cfg.smoothing_sigma, cfg.nms_tolerance).unwrap();
        let dims = v.dims();
        // Independent flood fill over the edge set from strong voxels.
        let mut reached = vec![false; e.bits().len()];
        let mut queue: Vec<usize> = (0..reached.len())
            .filter(|&i| e.bits()[i] && s.magnitude[i] >= high)
            .collect();
        for &q in &queue {
            reached[q] = true;
        }
        while let Some(idx) = queue.pop() {
            let (i, j, k) = (idx / 100, (idx / 10) % 10, idx % 10);
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    for dk in -1isize..=1 {
                        let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
                        if (0..10).contains(&a) && (0..10).contains(&b) && (0..10).contains(&c) {
                            let n = linear_index(dims, a as usize, b as usize, c as usize);
                            if e.bits()[n] && !reached[n] {
                                reached[n] = true;
                                queue.push(n);
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(reached, e.bits());
    }

    #[test]
    fn edge_map_file_round_trip() {
        let v = ball(10, 3.0);
        let e = canny_3d(&v, 0.05, &CannyConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.hvol");
        e.save(&p).unwrap();
        let back = EdgeMap::load(&p).unwrap();
        assert_eq!(back.bits(), e.bits());
        assert_eq!(back.edge_fraction(), e.edge_fraction());
        assert!(crate::volume::load_volume(&p, crate::VolumeFormat::RawV1).is_err());
    }
}
