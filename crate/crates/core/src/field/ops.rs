//! Channel-major 3D tensors and the layer kernels of the velocity field,
//! each with a hand-written backward pass.

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::volume::{voxel_count, Dims};

/// Floating-point type the network can run in.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// Row-major `c = op(a)·op(b) + beta·c` with `op(a)` of shape `m×k` and
    /// `op(b)` of shape `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Element (r, c) of op(X) for X stored row-major.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[$t],
                a_trans: bool,
                b: &[$t],
                b_trans: bool,
                beta: $t,
                c: &mut [$t],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `c` channels over a `dims` grid, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, dims: Dims) -> Self {
        Self {
            c,
            dims,
            data: vec![T::zero(); c * voxel_count(dims)],
        }
    }

    pub fn n(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.n();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Gathers `k³` shifted copies of every channel (zero padding) into a
/// `(c·k³) × n` matrix.
pub fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let [d0, d1, d2] = x.dims;
    let n = x.n();
    let r = (k / 2) as isize;
    let k3 = k * k * k;
    let mut cols = vec![T::zero(); x.c * k3 * n];
    for ci in 0..x.c {
        let src = x.channel(ci);
        for oz in 0..k {
            for oy in 0..k {
                for ox in 0..k {
                    let row = ci * k3 + (oz * k + oy) * k + ox;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (sz, sy, sx) = (oz as isize - r, oy as isize - r, ox as isize - r);
                    for i in 0..d0 {
                        let si = i as isize + sz;
                        if si < 0 || si >= d0 as isize {
                            continue;
                        }
                        for j in 0..d1 {
                            let sj = j as isize + sy;
                            if sj < 0 || sj >= d1 as isize {
                                continue;
                            }
                            let base = (i * d1 + j) * d2;
                            let sbase = (si as usize * d1 + sj as usize) * d2;
                            let lo = (-sx).max(0) as usize;
                            let hi = (d2 as isize - sx.max(0)) as usize;
                            for z in lo..hi {
                                dst[base + z] = src[(sbase as isize + z as isize + sx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &[T], c: usize, dims: Dims, k: usize) -> Tensor<T> {
    let [d0, d1, d2] = dims;
    let n = voxel_count(dims);
    let r = (k / 2) as isize;
    let k3 = k * k * k;
    let mut out = Tensor::zeros(c, dims);
    for ci in 0..c {
        let dst = &mut out.data[ci * n..(ci + 1) * n];
        for oz in 0..k {
            for oy in 0..k {
                for ox in 0..k {
                    let row = ci * k3 + (oz * k + oy) * k + ox;
                    let src = &cols[row * n..(row + 1) * n];
                    let (sz, sy, sx) = (oz as isize - r, oy as isize - r, ox as isize - r);
                    for i in 0..d0 {
                        let si = i as isize + sz;
                        if si < 0 || si >= d0 as isize {
                            continue;
                        }
                        for j in 0..d1 {
                            let sj = j as isize + sy;
                            if sj < 0 || sj >= d1 as isize {
                                continue;
                            }
                            let base = (i * d1 + j) * d2;
                            let sbase = (si as usize * d1 + sj as usize) * d2;
                            let lo = (-sx).max(0) as usize;
                            let hi = (d2 as isize - sx.max(0)) as usize;
                            for z in lo..hi {
                                dst[(sbase as isize + z as isize + sx) as usize] += src[base + z];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution with `k³` kernels, zero padding, stride 1. `w` is
/// `cout × (cin·k³)`, `b` is `cout`.
pub struct Conv<'a, T> {
    pub w: &'a [T],
    pub b: &'a [T],
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    dims: Dims,
}

impl<T: Scalar> Conv<'_, T> {
    fn fan(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn forward(&self, x: &Tensor<T>, keep: bool) -> (Tensor<T>, Option<ConvCache<T>>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let n = x.n();
        let cols = if self.k == 1 {
            x.data.clone()
        } else {
            im2col(x, self.k)
        };
        let mut y = Tensor::zeros(self.cout, x.dims);
        for (co, &bias) in self.b.iter().enumerate() {
            y.data[co * n..(co + 1) * n].fill(bias);
        }
        T::gemm(self.cout, self.fan(), n, self.w, false, &cols, false, T::one(), &mut y.data);
        let cache = keep.then(|| ConvCache { cols, dims: x.dims });
        (y, cache)
    }

    /// Accumulates into `gw`, `gb`; returns the input gradient.
    pub fn backward(
        &self,
        cache: ConvCache<T>,
        dy: &Tensor<T>,
        gw: &mut [T],
        gb: &mut [T],
    ) -> Tensor<T> {
        let n = dy.n();
        let fan = self.fan();
        T::gemm(self.cout, n, fan, &dy.data, false, &cache.cols, true, T::one(), gw);
        for (co, g) in gb.iter_mut().enumerate() {
            let mut s = T::zero();
            for &v in &dy.data[co * n..(co + 1) * n] {
                s += v;
            }
            *g += s;
        }
        let mut dcols = cache.cols;
        T::gemm(fan, self.cout, n, self.w, true, &dy.data, false, T::zero(), &mut dcols);
        if self.k == 1 {
            Tensor {
                c: self.cin,
                dims: cache.dims,
                data: dcols,
            }
        } else {
            col2im(&dcols, self.cin, cache.dims, self.k)
        }
    }
}

pub const RMS_EPS: f64 = 1e-5;

pub struct RmsCache<T> {
    xhat: Tensor<T>,
    inv_r: Vec<T>,
}

/// Per-voxel RMS normalization across channels with a per-channel gain.
pub fn rms_forward<T: Scalar>(x: &Tensor<T>, g: &[T], keep: bool) -> (Tensor<T>, Option<RmsCache<T>>) {
    let (c, n) = (x.c, x.n());
    let mut ms = vec![T::zero(); n];
    for ch in 0..c {
        for (m, &v) in ms.iter_mut().zip(x.channel(ch)) {
            *m += v * v;
        }
    }
    let inv_c = T::lit(1.0 / c as f64);
    let eps = T::lit(RMS_EPS);
    let inv_r: Vec<T> = ms.iter().map(|&m| (m * inv_c + eps).sqrt().recip()).collect();
    let mut xhat = x.clone();
    for ch in 0..c {
        for (v, &s) in xhat.data[ch * n..(ch + 1) * n].iter_mut().zip(&inv_r) {
            *v *= s;
        }
    }
    let mut y = xhat.clone();
    for (ch, &gain) in g.iter().enumerate() {
        for v in &mut y.data[ch * n..(ch + 1) * n] {
            *v *= gain;
        }
    }
    (y, keep.then_some(RmsCache { xhat, inv_r }))
}

pub fn rms_backward<T: Scalar>(cache: RmsCache<T>, g: &[T], dy: &Tensor<T>, gg: &mut [T]) -> Tensor<T> {
    let (c, n) = (dy.c, dy.n());
    let RmsCache { xhat, inv_r } = cache;
    let mut dxhat = dy.clone();
    for ch in 0..c {
        let dyc = dy.channel(ch);
        let xc = xhat.channel(ch);
        let mut s = T::zero();
        for v in 0..n {
            s += dyc[v] * xc[v];
        }
        gg[ch] += s;
        for v in &mut dxhat.data[ch * n..(ch + 1) * n] {
            *v *= g[ch];
        }
    }
    let mut dot = vec![T::zero(); n];
    for ch in 0..c {
        for ((d, &a), &b) in dot.iter_mut().zip(dxhat.channel(ch)).zip(xhat.channel(ch)) {
            *d += a * b;
        }
    }
    let inv_c = T::lit(1.0 / c as f64);
    let mut dx = dxhat;
    for ch in 0..c {
        let xc = &xhat.data[ch * n..(ch + 1) * n];
        for (v, d) in dx.data[ch * n..(ch + 1) * n].iter_mut().enumerate() {
            *d = (*d - xc[v] * dot[v] * inv_c) * inv_r[v];
        }
    }
    dx
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = *v * sigmoid(*v);
    }
    y
}

/// `x` is the forward input.
pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        let s = sigmoid(v);
        *d *= s * (T::one() + v * (T::one() - s));
    }
    dx
}

/// Sinusoidal features of `t ∈ [0, 1]`: `sin(π·k·t)`, `cos(π·k·t)` for
/// `k = 1..=dim/2`.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 1..=half {
        out.push((std::f64::consts::PI * k as f64 * t).sin());
    }
    for k in 1..=half {
        out.push((std::f64::consts::PI * k as f64 * t).cos());
    }
    out
}

/// Channel-wise `x·(1 + s) + h` where `[s; h] = W·emb + b`.
pub struct TimeAffine<'a, T> {
    pub w: &'a [T],
    pub b: &'a [T],
    pub c: usize,
}

pub struct TimeCache<T> {
    x: Tensor<T>,
    emb: Vec<T>,
    scale: Vec<T>,
}

impl<T: Scalar> TimeAffine<'_, T> {
    fn coefficients(&self, emb: &[T]) -> Vec<T> {
        let e = emb.len();
        (0..2 * self.c)
            .map(|r| {
                let mut s = self.b[r];
                for (j, &f) in emb.iter().enumerate() {
                    s += self.w[r * e + j] * f;
                }
                s
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor<T>, emb: &[T], keep: bool) -> (Tensor<T>, Option<TimeCache<T>>) {
        let n = x.n();
        let coef = self.coefficients(emb);
        let mut y = x.clone();
        for ch in 0..self.c {
            let (s, h) = (T::one() + coef[ch], coef[self.c + ch]);
            for v in &mut y.data[ch * n..(ch + 1) * n] {
                *v = *v * s + h;
            }
        }
        let cache = keep.then(|| TimeCache {
            x: x.clone(),
            emb: emb.to_vec(),
            scale: coef[..self.c].to_vec(),
        });
        (y, cache)
    }

    pub fn backward(&self, cache: TimeCache<T>, dy: &Tensor<T>, gw: &mut [T], gb: &mut [T]) -> Tensor<T> {
        let n = dy.n();
        let e = cache.emb.len();
        let mut dcoef = vec![T::zero(); 2 * self.c];
        let mut dx = dy.clone();
        for ch in 0..self.c {
            let dyc = dy.channel(ch);
            let xc = cache.x.channel(ch);
            let (mut ds, mut dh) = (T::zero(), T::zero());
            for v in 0..n {
                ds += dyc[v] * xc[v];
                dh += dyc[v];
            }
            dcoef[ch] = ds;
            dcoef[self.c + ch] = dh;
            let s = T::one() + cache.scale[ch];
            for d in &mut dx.data[ch * n..(ch + 1) * n] {
                *d *= s;
            }
        }
        for (r, &d) in dcoef.iter().enumerate() {
            gb[r] += d;
            for (j, &f) in cache.emb.iter().enumerate() {
                gw[r * e + j] += d * f;
            }
        }
        dx
    }
}

fn halve(dims: Dims) -> Dims {
    dims.map(|d| d / 2)
}

/// Folds each 2×2×2 cell into 8 channels: channel `8c + 4pz + 2py + px`.
pub fn space_to_channel<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let h = halve(x.dims);
    let [d0, d1, d2] = x.dims;
    let nh = voxel_count(h);
    let mut y = Tensor::zeros(8 * x.c, h);
    for ch in 0..x.c {
        let src = x.channel(ch);
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    let p = (i % 2) * 4 + (j % 2) * 2 + (k % 2);
                    let dst = (ch * 8 + p) * nh + ((i / 2) * h[1] + j / 2) * h[2] + k / 2;
                    y.data[dst] = src[(i * d1 + j) * d2 + k];
                }
            }
        }
    }
    y
}

pub fn channel_to_space<T: Scalar>(y: &Tensor<T>, dims: Dims) -> Tensor<T> {
    let c = y.c / 8;
    let h = y.dims;
    let nh = voxel_count(h);
    let [d0, d1, d2] = dims;
    let mut x = Tensor::zeros(c, dims);
    let n = voxel_count(dims);
    for ch in 0..c {
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    let p = (i % 2) * 4 + (j % 2) * 2 + (k % 2);
                    let src = (ch * 8 + p) * nh + ((i / 2) * h[1] + j / 2) * h[2] + k / 2;
                    x.data[ch * n + (i * d1 + j) * d2 + k] = y.data[src];
                }
            }
        }
    }
    x
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let dims = x.dims.map(|d| d * 2);
    let [d0, d1, d2] = dims;
    let n = voxel_count(dims);
    let h = x.dims;
    let nh = x.n();
    let mut y = Tensor::zeros(x.c, dims);
    for ch in 0..x.c {
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    y.data[ch * n + (i * d1 + j) * d2 + k] =
                        x.data[ch * nh + ((i / 2) * h[1] + j / 2) * h[2] + k / 2];
                }
            }
        }
    }
    y
}

pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let h = halve(dy.dims);
    let [d0, d1, d2] = dy.dims;
    let n = dy.n();
    let nh = voxel_count(h);
    let mut dx = Tensor::zeros(dy.c, h);
    for ch in 0..dy.c {
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    dx.data[ch * nh + ((i / 2) * h[1] + j / 2) * h[2] + k / 2] +=
                        dy.data[ch * n + (i * d1 + j) * d2 + k];
                }
            }
        }
    }
    dx
}

pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        dims: a.dims,
        data,
    }
}

pub fn split<T: Scalar>(x: Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let at = ca * x.n();
    let mut data = x.data;
    let tail = data.split_off(at);
    (
        Tensor {
            c: ca,
            dims: x.dims,
            data,
        },
        Tensor {
            c: x.c - ca,
            dims: x.dims,
            data: tail,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, dims: Dims, rng: &mut impl Rng) -> Tensor<f64> {
        Tensor {
            c,
            dims,
            data: (0..c * voxel_count(dims)).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn gemm_transposes_agree_with_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ stored as k×m.
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        f64::gemm(m, k, n, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn direct_convolution_matches_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = [4, 5, 3];
        let x = random(2, dims, &mut rng);
        let w: Vec<f64> = (0..3 * 2 * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.1, -0.2, 0.3];
        let conv = Conv { w: &w, b: &b, cin: 2, cout: 3, k: 3 };
        let (y, _) = conv.forward(&x, false);
        let n = voxel_count(dims);
        for co in 0..3 {
            for i in 0..dims[0] as isize {
                for j in 0..dims[1] as isize {
                    for k in 0..dims[2] as isize {
                        let mut s = b[co];
                        for ci in 0..2 {
                            for (oz, dz) in (-1..=1).enumerate() {
                                for (oy, dy) in (-1..=1).enumerate() {
                                    for (ox, dx) in (-1..=1).enumerate() {
                                        let (a, bb, c) = (i + dz, j + dy, k + dx);
                                        if a < 0 || bb < 0 || c < 0 || a >= 4 || bb >= 5 || c >= 3 {
                                            continue;
                                        }
                                        let wi = co * 54 + ci * 27 + (oz * 3 + oy) * 3 + ox;
                                        s += w[wi] * x.data[ci * n + ((a * 5 + bb) * 3 + c) as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data[co * n + ((i * 5 + j) * 3 + k) as usize];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [3, 4, 5];
        let x = random(2, dims, &mut rng);
        let cols = im2col(&x, 3);
        let y: Vec<f64> = (0..cols.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = col2im(&y, 2, dims, 3);
        assert!((dot(&cols, &y) - dot(&x.data, &back.data)).abs() < 1e-10);
    }

    #[test]
    fn space_to_channel_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(3, [4, 6, 2], &mut rng);
        let y = space_to_channel(&x);
        assert_eq!((y.c, y.dims), (24, [2, 3, 1]));
        assert_eq!(channel_to_space(&y, x.dims), x);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(2, [2, 3, 2], &mut rng);
        let dy = random(2, [4, 6, 4], &mut rng);
        let y = upsample(&x);
        assert!((dot(&y.data, &dy.data) - dot(&x.data, &upsample_backward(&dy).data)).abs() < 1e-12);
    }

    #[test]
    fn convolution_commutes_with_periodic_shifts_in_the_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [8, 8, 8];
        let x = random(1, dims, &mut rng);
        let shift = |t: &Tensor<f64>| {
            let mut s = t.clone();
            for i in 0..8 {
                for j in 0..8 {
                    for k in 0..8 {
                        s.data[(((i + 1) % 8) * 8 + j) * 8 + k] = t.data[(i * 8 + j) * 8 + k];
                    }
                }
            }
            s
        };
        let w: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let conv = Conv { w: &w, b: &[0.5], cin: 1, cout: 1, k: 3 };
        let a = shift(&conv.forward(&x, false).0);
        let b = conv.forward(&shift(&x), false).0;
        for i in 2..7 {
            for j in 1..7 {
                for k in 1..7 {
                    let idx = (i * 8 + j) * 8 + k;
                    assert!((a.data[idx] - b.data[idx]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rms_output_has_unit_rms_per_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(4, [2, 2, 2], &mut rng);
        let (y, _) = rms_forward(&x, &[1.0; 4], false);
        for v in 0..8 {
            let ms: f64 = (0..4).map(|c| y.data[c * 8 + v].powi(2)).sum::<f64>() / 4.0;
            assert!((ms - 1.0).abs() < 1e-3);
        }
    }
}
