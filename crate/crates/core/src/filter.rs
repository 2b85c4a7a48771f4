//! Separable filtering helpers on row-major f64 grids.

use crate::volume::{linear_index, Dims};

/// Normalized 1D Gaussian taps over `[-radius, radius]`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    if sigma <= 0.0 {
        let mut k = vec![0.0; 2 * radius + 1];
        k[radius] = 1.0;
        return k;
    }
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Radius covering three standard deviations.
pub fn radius_for(sigma: f64) -> usize {
    (3.0 * sigma).ceil().max(0.0) as usize
}

/// Convolves one axis with `taps` (odd length), replicating edge voxels.
pub fn convolve_axis(src: &[f64], dims: Dims, axis: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let n = dims[axis] as isize;
    let mut out = vec![0.0; src.len()];
    let mut line = vec![0.0; dims[axis]];
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for u in 0..dims[a] {
        for v in 0..dims[b] {
            let at = |t: usize| {
                let mut idx = [0usize; 3];
                idx[axis] = t;
                idx[a] = u;
                idx[b] = v;
                linear_index(dims, idx[0], idx[1], idx[2])
            };
            for (t, l) in line.iter_mut().enumerate() {
                *l = src[at(t)];
            }
            for t in 0..dims[axis] {
                let mut acc = 0.0;
                for (q, w) in taps.iter().enumerate() {
                    let s = (t as isize + q as isize - r).clamp(0, n - 1) as usize;
                    acc += w * line[s];
                }
                out[at(t)] = acc;
            }
        }
    }
    out
}

/// Isotropic Gaussian smoothing with edge replication.
pub fn gaussian_smooth(src: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let taps = gaussian_kernel(sigma, radius_for(sigma));
    let x = convolve_axis(src, dims, 0, &taps);
    let y = convolve_axis(&x, dims, 1, &taps);
    convolve_axis(&y, dims, 2, &taps)
}
