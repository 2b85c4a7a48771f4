//! Blind image-level baselines: subject-level histogram matching against a
//! pooled target histogram, and SSIMH, which swaps the low-frequency 3D DCT
//! coefficients of a source volume for those of the mean target volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Volume3D};

/// Piecewise-linear CDF on `[0, 1]`: `cdf[b]` is the mass below the edge
/// `b / bins`, so it has `bins + 1` entries from 0 to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetHistogram {
    pub bins: usize,
    pub cdf: Vec<f64>,
}

fn bin_of(x: f64, bins: usize) -> usize {
    ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Empirical CDF at the bin edges.
pub fn edge_cdf<'a>(values: impl IntoIterator<Item = &'a f32>, bins: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; bins];
    let mut n = 0u64;
    for &v in values {
        counts[bin_of(v as f64, bins)] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("no voxels to build a histogram from".into()));
    }
    let mut cdf = Vec::with_capacity(bins + 1);
    let mut acc = 0u64;
    cdf.push(0.0);
    for c in counts {
        acc += c;
        cdf.push(acc as f64 / n as f64);
    }
    Ok(cdf)
}

impl TargetHistogram {
    /// CDF value at `x` with linear interpolation inside a bin.
    pub fn eval(&self, x: f64) -> f64 {
        eval_cdf(&self.cdf, x)
    }

    /// Smallest `x` with `eval(x) = u`, linear inside a bin.
    pub fn quantile(&self, u: f64) -> f64 {
        let bins = self.bins;
        let u = u.clamp(0.0, 1.0);
        let b = self.cdf[1..].partition_point(|&c| c < u).min(bins - 1);
        let (lo, hi) = (self.cdf[b], self.cdf[b + 1]);
        let frac = if hi > lo { ((u - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        (b as f64 + frac) / bins as f64
    }
}

fn eval_cdf(cdf: &[f64], x: f64) -> f64 {
    let bins = cdf.len() - 1;
    let x = x.clamp(0.0, 1.0);
    let b = bin_of(x, bins);
    let frac = x * bins as f64 - b as f64;
    cdf[b] + (cdf[b + 1] - cdf[b]) * frac
}

/// Pooled CDF over every voxel of every target volume.
pub fn build_target_histogram(volumes: &[Volume3D], bins: usize) -> Result<TargetHistogram> {
    if volumes.is_empty() {
        return Err(Error::InvalidParam("no target volumes given".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidParam("histogram needs at least 2 bins".into()));
    }
    let cdf = edge_cdf(volumes.iter().flat_map(|v| v.data().iter()), bins)?;
    Ok(TargetHistogram { bins, cdf })
}

/// Mid-rank empirical CDF of each value: ties share `(first + last + 1) / 2N`.
pub fn midrank_cdf(values: &[f32]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let u = (start + end) as f64 / (2 * n) as f64;
        for &i in &order[start..end] {
            out[i] = u;
        }
        start = end;
    }
    out
}

/// `out = F_target⁻¹(F_src(x))` with the exact mid-rank source CDF and the
/// piecewise-linear target quantile. Monotone in the input.
pub fn histogram_match(src: &Volume3D, hist: &TargetHistogram) -> Result<Volume3D> {
    let data = src.data();
    if data.iter().all(|&x| x == data[0]) {
        return Err(Error::Degenerate("source volume is constant".into()));
    }
    let u = midrank_cdf(data);
    src.with_data(u.iter().map(|&u| hist.quantile(u) as f32).collect())
}

/// Orthonormal DCT-II matrix, row `k`, column `n`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for j in 0..n {
            m[k * n + j] = s * (std::f64::consts::PI * (j as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

/// Applies the 1D transform (or its transpose) along one axis.
fn transform_axis(data: &mut [f64], dims: Dims, axis: usize, inverse: bool) {
    let n = dims[axis];
    let m = dct_matrix(n);
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut line = vec![0.0; n];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (j, l) in line.iter_mut().enumerate() {
                *l = data[base + j * stride];
            }
            for k in 0..n {
                let mut acc = 0.0;
                for (j, l) in line.iter().enumerate() {
                    let c = if inverse { m[j * n + k] } else { m[k * n + j] };
                    acc += c * l;
                }
                data[base + k * stride] = acc;
            }
        }
    }
}

fn check_len(v: &[f64], dims: Dims) -> Result<()> {
    if v.len() != voxel_count(dims) {
        return Err(Error::Shape(format!(
            "{} values do not fill {dims:?}",
            v.len()
        )));
    }
    Ok(())
}

/// Separable orthonormal DCT-II.
pub fn dct3(v: &[f64], dims: Dims) -> Result<Vec<f64>> {
    check_len(v, dims)?;
    let mut out = v.to_vec();
    for a in 0..3 {
        transform_axis(&mut out, dims, a, false);
    }
    Ok(out)
}

/// Inverse of [`dct3`] (separable DCT-III).
pub fn idct3(c: &[f64], dims: Dims) -> Result<Vec<f64>> {
    check_len(c, dims)?;
    let mut out = c.to_vec();
    for a in 0..3 {
        transform_axis(&mut out, dims, a, true);
    }
    Ok(out)
}

/// Whether coefficient `(u, v, w)` lies in the swapped region
/// `u/nx + v/ny + w/nz < cutoff`.
pub fn is_low_frequency(idx: Dims, dims: Dims, cutoff: f64) -> bool {
    let r: f64 = (0..3).map(|a| idx[a] as f64 / dims[a] as f64).sum();
    r < cutoff
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub histogram_bins: usize,
    /// Normalized ℓ¹ frequency radius below which SSIMH swaps coefficients.
    pub ssimh_cutoff: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            histogram_bins: 1024,
            ssimh_cutoff: 0.05,
        }
    }
}

/// Voxelwise mean of equally shaped volumes.
pub fn mean_volume(volumes: &[Volume3D]) -> Result<Volume3D> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidParam("no volumes to average".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for v in volumes {
        if v.dims() != first.dims() {
            return Err(Error::Shape(format!(
                "cannot average {:?} with {:?}",
                v.dims(),
                first.dims()
            )));
        }
        for (a, &x) in acc.iter_mut().zip(v.data()) {
            *a += x as f64;
        }
    }
    let n = volumes.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    first.with_data(acc.iter().map(|&a| a as f32).collect())
}

/// Replaces the DCT coefficients with `u/nx + v/ny + w/nz < cutoff` by the
/// target mean's. A cutoff of 0 keeps the source; 3 or more yields the
/// target mean.
pub fn ssimh(src: &Volume3D, target_mean: &Volume3D, cutoff: f64) -> Result<Volume3D> {
    let dims = src.dims();
    if target_mean.dims() != dims {
        return Err(Error::Shape(format!(
            "target mean {:?} does not match source {dims:?}",
            target_mean.dims()
        )));
    }
    if !(cutoff >= 0.0) {
        return Err(Error::InvalidParam(format!("cutoff {cutoff} must be >= 0")));
    }
    if cutoff == 0.0 {
        return Ok(src.clone());
    }
    if cutoff >= 3.0 {
        return src.with_data(target_mean.data().to_vec());
    }
    let mut cs = dct3(&src.to_f64(), dims)?;
    let ct = dct3(&target_mean.to_f64(), dims)?;
    let mut at = 0;
    for u in 0..dims[0] {
        for v in 0..dims[1] {
            for w in 0..dims[2] {
                if is_low_frequency([u, v, w], dims, cutoff) {
                    cs[at] = ct[at];
                }
                at += 1;
            }
        }
    }
    let out = idct3(&cs, dims)?;
    src.with_data(out.iter().map(|&x| x as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Dims, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..voxel_count(dims)).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn naive_dct3(v: &[f64], dims: Dims) -> Vec<f64> {
        let s = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        let c = |k: usize, j: usize, n: usize| (std::f64::consts::PI * (j as f64 + 0.5) * k as f64 / n as f64).cos();
        let [a, b, d] = dims;
        let mut out = vec![0.0; v.len()];
        for u in 0..a {
            for w in 0..b {
                for z in 0..d {
                    let mut acc = 0.0;
                    for i in 0..a {
                        for j in 0..b {
                            for k in 0..d {
                                acc += v[(i * b + j) * d + k] * c(u, i, a) * c(w, j, b) * c(z, k, d);
                            }
                        }
                    }
                    out[(u * b + w) * d + z] = acc * s(u, a) * s(w, b) * s(z, d);
                }
            }
        }
        out
    }

    #[test]
    fn dct_matches_naive_sum() {
        for dims in [[4, 4, 4], [3, 5, 2]] {
            let v = random(dims, 1);
            let fast = dct3(&v, dims).unwrap();
            let slow = naive_dct3(&v, dims);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dct_round_trip_parseval_and_dc() {
        let dims = [6, 5, 7];
        let v = random(dims, 2);
        let c = dct3(&v, dims).unwrap();
        let back = idct3(&c, dims).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-10));
        let e1: f64 = v.iter().map(|x| x * x).sum();
        let e2: f64 = c.iter().map(|x| x * x).sum();
        assert!((e1 - e2).abs() < 1e-10);
        let k = dct3(&vec![0.5; 210], dims).unwrap();
        assert!((k[0] - 0.5 * 210f64.sqrt()).abs() < 1e-12);
        assert!(k[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn dct_is_linear() {
        let dims = [4, 3, 5];
        let a = random(dims, 3);
        let b = random(dims, 4);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 1.7 * x + y).collect();
        let (ca, cb, cm) = (dct3(&a, dims).unwrap(), dct3(&b, dims).unwrap(), dct3(&mix, dims).unwrap());
        for i in 0..cm.len() {
            assert!((cm[i] - (1.7 * ca[i] + cb[i])).abs() < 1e-12);
        }
    }

    fn volume(dims: Dims, seed: u64) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(dims, |_, _, _| rng.random()).unwrap()
    }

    #[test]
    fn ssimh_extremes_and_idempotence() {
        let s = volume([6, 6, 6], 1);
        let t = volume([6, 6, 6], 2);
        assert_eq!(ssimh(&s, &t, 0.0).unwrap(), s);
        assert_eq!(ssimh(&s, &t, 3.5).unwrap().data(), t.data());
        assert_eq!(ssimh(&s, &t, 3.0).unwrap().data(), t.data());
        // Covering every index below the strict bound also reproduces t.
        let all = ssimh(&s, &t, 2.9).unwrap();
        assert!(all.data().iter().zip(t.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        let once = ssimh(&s, &t, 0.4).unwrap();
        let twice = ssimh(&once, &t, 0.4).unwrap();
        assert!(once.data().iter().zip(twice.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(ssimh(&s, &volume([6, 6, 5], 0), 0.1).is_err());
    }

    #[test]
    fn ssimh_replaces_only_the_dc_term_at_small_cutoff() {
        let s = volume([8, 8, 8], 3);
        let t = volume([8, 8, 8], 4);
        let out = ssimh(&s, &t, 1e-9).unwrap();
        let mean = |v: &Volume3D| v.data().iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        assert!((mean(&out) - mean(&t)).abs() < 1e-6);
        let shift = mean(&t) - mean(&s);
        for (o, x) in out.data().iter().zip(s.data()) {
            assert!((*o as f64 - (*x as f64 + shift)).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_and_ramp_cdfs() {
        let c = Volume3D::from_fn([4, 4, 4], |_, _, _| 0.3).unwrap();
        let h = build_target_histogram(&[c.clone()], 10).unwrap();
        assert!(h.cdf[..3].iter().all(|&v| v == 0.0));
        assert!(h.cdf[4..].iter().all(|&v| v == 1.0));
        let twice = build_target_histogram(&[c.clone(), c], 10).unwrap();
        assert_eq!(twice, h);
        let ramp = Volume3D::from_fn([10, 10, 10], |i, j, k| ((i * 100 + j * 10 + k) as f32 + 0.5) / 1000.0).unwrap();
        let h = build_target_histogram(&[ramp], 50).unwrap();
        for (b, &v) in h.cdf.iter().enumerate() {
            assert!((v - b as f64 / 50.0).abs() <= 1.0 / 50.0);
        }
        assert!(build_target_histogram(&[], 10).is_err());
    }

    #[test]
    fn matching_is_monotone_and_hits_the_target_cdf() {
        let bins = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = Volume3D::from_fn([16, 16, 16], |_, _, _| rng.random::<f32>().powi(6)).unwrap();
        let tgt = Volume3D::from_fn([16, 16, 16], |_, _, _| rng.random::<f32>().sqrt()).unwrap();
        let h = build_target_histogram(&[tgt], bins).unwrap();
        let out = histogram_match(&src, &h).unwrap();
        let got = edge_cdf(out.data(), bins).unwrap();
        let sup = got.iter().zip(&h.cdf).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(sup < 2.0 / bins as f64, "{sup}");
        let mut pairs: Vec<(f32, f32)> = src.data().iter().copied().zip(out.data().iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[1].1 >= w[0].1));
    }

    #[test]
    fn matching_to_own_histogram_is_near_identity() {
        let bins = 128;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Volume3D::from_fn([12, 12, 12], |_, _, _| rng.random()).unwrap();
        let h = build_target_histogram(&[v.clone()], bins).unwrap();
        let out = histogram_match(&v, &h).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1.0 / bins as f32 + 1e-6);
        }
        let flat = Volume3D::from_fn([4, 4, 4], |_, _, _| 0.5).unwrap();
        assert!(matches!(histogram_match(&flat, &h), Err(Error::Degenerate(_))));
    }
}
