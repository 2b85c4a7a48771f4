//! The velocity field `v_θ(x_t, t; e, i, j, k)`: a small 3D U-Net over five
//! input channels with sinusoidal time conditioning, written out by hand with
//! an exact backward pass.
//!
//! Layout per level `l` (width `w_l = base_width · level_multipliers[l]`):
//! residual blocks, then space-to-channel and a 1×1 convolution into the next
//! level. The decoder mirrors it with a 1×1 convolution, nearest-neighbour
//! upsampling and a skip concatenation. A block is
//! `conv → RMSNorm → time scale-shift → SiLU → conv → RMSNorm → SiLU` plus a
//! residual path (1×1 convolution when widths differ).

mod ops;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, write_atomic, Dims};

pub use ops::{Scalar, Tensor};
use ops::{
    channel_to_space, concat, rms_backward, rms_forward, silu_backward, silu_forward,
    space_to_channel, split, time_features, upsample, upsample_backward, Conv, ConvCache,
    RmsCache, TimeAffine, TimeCache,
};

/// Number of input channels: noisy image, edge map, three coordinates.
pub const IN_CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldArch {
    pub base_width: usize,
    /// One entry per resolution level.
    pub level_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    /// Odd spatial kernel size of the block convolutions.
    pub kernel_size: usize,
    /// Length of the sinusoidal time feature vector (even).
    pub time_embed_dim: usize,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self {
            base_width: 16,
            level_multipliers: vec![1, 2],
            blocks_per_level: 1,
            kernel_size: 3,
            time_embed_dim: 16,
        }
    }
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("field architecture: {m}")));
        if self.base_width == 0 || self.level_multipliers.is_empty() {
            return bad("empty width or levels");
        }
        if self.level_multipliers.contains(&0) {
            return bad("zero level multiplier");
        }
        if self.blocks_per_level == 0 {
            return bad("blocks_per_level must be >= 1");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 == 1 {
            return bad("time_embed_dim must be even and positive");
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.level_multipliers.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.level_multipliers[level]
    }

    /// Spatial sizes must be divisible by this factor.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Normal with variance `1 / fan_in`.
    FanIn(usize),
    Zero,
    One,
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    offset: usize,
    len: usize,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
struct ConvSlots {
    w: Slot,
    b: Slot,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockSlots {
    conv1: ConvSlots,
    g1: Slot,
    time_w: Slot,
    time_b: Slot,
    conv2: ConvSlots,
    g2: Slot,
    skip: Option<ConvSlots>,
    cout: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    slots: Vec<Slot>,
    total: usize,
    stem: ConvSlots,
    encoder: Vec<Vec<BlockSlots>>,
    down: Vec<ConvSlots>,
    up: Vec<ConvSlots>,
    decoder: Vec<Vec<BlockSlots>>,
    head: ConvSlots,
}

struct Builder {
    slots: Vec<Slot>,
    total: usize,
}

impl Builder {
    fn slot(&mut self, len: usize, init: Init) -> Slot {
        let s = Slot {
            offset: self.total,
            len,
            init,
        };
        self.total += len;
        self.slots.push(s);
        s
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, zero: bool) -> ConvSlots {
        let fan = cin * k * k * k;
        let w = self.slot(cout * fan, if zero { Init::Zero } else { Init::FanIn(fan) });
        let b = self.slot(cout, Init::Zero);
        ConvSlots { w, b, cin, cout, k }
    }

    fn block(&mut self, cin: usize, cout: usize, k: usize, e: usize) -> BlockSlots {
        let conv1 = self.conv(cin, cout, k, false);
        let g1 = self.slot(cout, Init::One);
        let time_w = self.slot(2 * cout * e, Init::FanIn(e));
        let time_b = self.slot(2 * cout, Init::Zero);
        let conv2 = self.conv(cout, cout, k, false);
        let g2 = self.slot(cout, Init::One);
        let skip = (cin != cout).then(|| self.conv(cin, cout, 1, false));
        BlockSlots {
            conv1,
            g1,
            time_w,
            time_b,
            conv2,
            g2,
            skip,
            cout,
        }
    }
}

impl Layout {
    fn new(arch: &FieldArch) -> Self {
        let mut b = Builder {
            slots: Vec::new(),
            total: 0,
        };
        let (k, e, levels) = (arch.kernel_size, arch.time_embed_dim, arch.levels());
        let stem = b.conv(IN_CHANNELS, arch.width(0), k, false);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..levels {
            let w = arch.width(l);
            encoder.push((0..arch.blocks_per_level).map(|_| b.block(w, w, k, e)).collect());
            if l + 1 < levels {
                down.push(b.conv(8 * w, arch.width(l + 1), 1, false));
            }
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..levels - 1).rev() {
            let w = arch.width(l);
            up.push(b.conv(arch.width(l + 1), w, 1, false));
            decoder.push(
                (0..arch.blocks_per_level)
                    .map(|i| b.block(if i == 0 { 2 * w } else { w }, w, k, e))
                    .collect(),
            );
        }
        let head = b.conv(arch.width(0), 1, 1, true);
        Layout {
            slots: b.slots,
            total: b.total,
            stem,
            encoder,
            down,
            up,
            decoder,
            head,
        }
    }
}

fn part<T>(v: &[T], s: Slot) -> &[T] {
    &v[s.offset..s.offset + s.len]
}

fn part_mut<T>(v: &mut [T], s: Slot) -> &mut [T] {
    &mut v[s.offset..s.offset + s.len]
}

fn conv<'a, T>(theta: &'a [T], c: &ConvSlots) -> Conv<'a, T> {
    Conv {
        w: part(theta, c.w),
        b: part(theta, c.b),
        cin: c.cin,
        cout: c.cout,
        k: c.k,
    }
}

fn conv_backward<T: Scalar>(
    theta: &[T],
    grad: &mut [T],
    c: &ConvSlots,
    cache: ConvCache<T>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (gw, gb) = grad.split_at_mut(c.b.offset);
    // The weight slot immediately precedes its bias slot.
    let gw = &mut gw[c.w.offset..];
    let gb = &mut gb[..c.b.len];
    conv(theta, c).backward(cache, dy, gw, gb)
}

struct BlockCache<T> {
    conv1: ConvCache<T>,
    rms1: RmsCache<T>,
    time: TimeCache<T>,
    act1: Tensor<T>,
    conv2: ConvCache<T>,
    rms2: RmsCache<T>,
    act2: Tensor<T>,
    skip: Option<ConvCache<T>>,
}

fn block_forward<T: Scalar>(
    theta: &[T],
    s: &BlockSlots,
    x: Tensor<T>,
    emb: &[T],
    keep: bool,
) -> (Tensor<T>, Option<BlockCache<T>>) {
    let (h, c1) = conv(theta, &s.conv1).forward(&x, keep);
    let (h, r1) = rms_forward(&h, part(theta, s.g1), keep);
    let affine = TimeAffine {
        w: part(theta, s.time_w),
        b: part(theta, s.time_b),
        c: s.cout,
    };
    let (a1, tc) = affine.forward(&h, emb, keep);
    drop(h);
    let h = silu_forward(&a1);
    let (h, c2) = conv(theta, &s.conv2).forward(&h, keep);
    let (a2, r2) = rms_forward(&h, part(theta, s.g2), keep);
    drop(h);
    let mut out = silu_forward(&a2);
    let skip_cache = match &s.skip {
        Some(sk) => {
            let (r, c) = conv(theta, sk).forward(&x, keep);
            out.add_assign(&r);
            c
        }
        None => {
            out.add_assign(&x);
            None
        }
    };
    let cache = keep.then(|| BlockCache {
        conv1: c1.unwrap(),
        rms1: r1.unwrap(),
        time: tc.unwrap(),
        act1: a1,
        conv2: c2.unwrap(),
        rms2: r2.unwrap(),
        act2: a2,
        skip: skip_cache,
    });
    (out, cache)
}

fn block_backward<T: Scalar>(
    theta: &[T],
    grad: &mut [T],
    s: &BlockSlots,
    cache: BlockCache<T>,
    dout: Tensor<T>,
) -> Tensor<T> {
    let d = silu_backward(&cache.act2, &dout);
    let d = rms_backward(cache.rms2, part(theta, s.g2), &d, part_mut(grad, s.g2));
    let d = conv_backward(theta, grad, &s.conv2, cache.conv2, &d);
    let d = silu_backward(&cache.act1, &d);
    let affine = TimeAffine {
        w: part(theta, s.time_w),
        b: part(theta, s.time_b),
        c: s.cout,
    };
    let d = {
        let (gw, rest) = grad.split_at_mut(s.time_b.offset);
        affine.backward(
            cache.time,
            &d,
            &mut gw[s.time_w.offset..],
            &mut rest[..s.time_b.len],
        )
    };
    let d = rms_backward(cache.rms1, part(theta, s.g1), &d, part_mut(grad, s.g1));
    let mut dx = conv_backward(theta, grad, &s.conv1, cache.conv1, &d);
    match (&s.skip, cache.skip) {
        (Some(sk), Some(c)) => dx.add_assign(&conv_backward(theta, grad, sk, c, &dout)),
        _ => dx.add_assign(&dout),
    }
    dx
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Tape<T> {
    dims: Dims,
    theta: Vec<T>,
    stem: ConvCache<T>,
    encoder: Vec<Vec<BlockCache<T>>>,
    down: Vec<(ConvCache<T>, Dims)>,
    up: Vec<ConvCache<T>>,
    decoder: Vec<Vec<BlockCache<T>>>,
    head: ConvCache<T>,
}

/// Spatial inputs of one evaluation, each of length `voxel_count(dims)`.
#[derive(Clone, Copy, Debug)]
pub struct FieldInput<'a, T> {
    pub dims: Dims,
    pub x_t: &'a [T],
    pub edge: &'a [T],
    pub coords: [&'a [T]; 3],
}

impl<T: Scalar> FieldInput<'_, T> {
    fn stack(&self) -> Result<Tensor<T>> {
        let n = voxel_count(self.dims);
        let chans = [
            self.x_t,
            self.edge,
            self.coords[0],
            self.coords[1],
            self.coords[2],
        ];
        if chans.iter().any(|c| c.len() != n) {
            return Err(Error::Shape(format!(
                "field inputs must all hold {n} voxels for dims {:?}",
                self.dims
            )));
        }
        let mut data = Vec::with_capacity(IN_CHANNELS * n);
        for c in chans {
            data.extend_from_slice(c);
        }
        Ok(Tensor {
            c: IN_CHANNELS,
            dims: self.dims,
            data,
        })
    }
}

/// Trainable velocity field: an architecture and a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    arch: FieldArch,
    params: Vec<f64>,
}

impl VelocityField {
    pub fn new(arch: FieldArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let want = arch.param_count();
        if params.len() != want {
            return Err(Error::Shape(format!(
                "architecture needs {want} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("field parameters".into()));
        }
        Ok(Self { arch, params })
    }

    /// Fan-in scaled normal weights, unit norm gains, zero biases and a
    /// zero output layer.
    pub fn init(arch: FieldArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        for s in &layout.slots {
            let dst = &mut params[s.offset..s.offset + s.len];
            match s.init {
                Init::Zero => {}
                Init::One => dst.fill(1.0),
                Init::FanIn(fan) => {
                    let d = Normal::new(0.0, (1.0 / fan as f64).sqrt()).expect("positive std");
                    for p in dst {
                        *p = d.sample(rng);
                    }
                }
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &FieldArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_dims(&self, dims: Dims) -> Result<()> {
        let m = self.arch.size_multiple();
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {dims:?} must be positive multiples of {m}"
            )));
        }
        Ok(())
    }

    fn theta<T: Scalar>(&self) -> Vec<T> {
        self.params.iter().map(|&p| T::lit(p)).collect()
    }

    fn run<T: Scalar>(&self, input: &FieldInput<T>, t: f64, keep: bool) -> Result<(Vec<T>, Option<Tape<T>>)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidParam(format!("time {t} outside [0, 1]")));
        }
        self.check_dims(input.dims)?;
        let x = input.stack()?;
        let layout = Layout::new(&self.arch);
        let theta = self.theta::<T>();
        let emb: Vec<T> = time_features(t, self.arch.time_embed_dim)
            .into_iter()
            .map(T::lit)
            .collect();
        let th = &theta[..];

        let (mut h, stem_c) = conv(th, &layout.stem).forward(&x, keep);
        drop(x);
        let levels = self.arch.levels();
        let mut skips = Vec::new();
        let mut enc_c = Vec::new();
        let mut down_c = Vec::new();
        for l in 0..levels {
            let mut caches = Vec::new();
            for s in &layout.encoder[l] {
                let (o, c) = block_forward(th, s, h, &emb, keep);
                h = o;
                caches.extend(c);
            }
            enc_c.push(caches);
            if l + 1 < levels {
                let dims = h.dims;
                let folded = space_to_channel(&h);
                skips.push(h);
                let (o, c) = conv(th, &layout.down[l]).forward(&folded, keep);
                h = o;
                down_c.extend(c.map(|c| (c, dims)));
            }
        }
        let mut up_c = Vec::new();
        let mut dec_c = Vec::new();
        for (i, l) in (0..levels - 1).rev().enumerate() {
            let (o, c) = conv(th, &layout.up[i]).forward(&h, keep);
            up_c.extend(c);
            let skip = skips.pop().expect("one skip per level");
            h = concat(&upsample(&o), &skip);
            debug_assert_eq!(h.c, 2 * self.arch.width(l));
            let mut caches = Vec::new();
            for s in &layout.decoder[i] {
                let (o, c) = block_forward(th, s, h, &emb, keep);
                h = o;
                caches.extend(c);
            }
            dec_c.push(caches);
        }
        let (out, head_c) = conv(th, &layout.head).forward(&h, keep);
        let tape = if keep {
            Some(Tape {
                dims: input.dims,
                theta,
                stem: stem_c.unwrap(),
                encoder: enc_c,
                down: down_c,
                up: up_c,
                decoder: dec_c,
                head: head_c.unwrap(),
            })
        } else {
            None
        };
        Ok((out.data, tape))
    }

    /// Predicted velocity, one value per voxel.
    pub fn forward<T: Scalar>(&self, input: &FieldInput<T>, t: f64) -> Result<Vec<T>> {
        Ok(self.run(input, t, false)?.0)
    }

    /// Forward pass that records what [`VelocityField::backward`] needs.
    pub fn forward_train<T: Scalar>(&self, input: &FieldInput<T>, t: f64) -> Result<(Vec<T>, Tape<T>)> {
        let (out, tape) = self.run(input, t, true)?;
        Ok((out, tape.expect("tape requested")))
    }

    /// Gradient of a scalar loss with respect to θ, given `d loss / d output`.
    pub fn backward<T: Scalar>(&self, tape: Tape<T>, dloss_dout: &[T]) -> Result<Vec<f64>> {
        let n = voxel_count(tape.dims);
        if dloss_dout.len() != n {
            return Err(Error::Shape(format!(
                "output gradient has {} voxels, expected {n}",
                dloss_dout.len()
            )));
        }
        let layout = Layout::new(&self.arch);
        let th = &tape.theta[..];
        let mut grad = vec![T::zero(); layout.total];
        let dy = Tensor {
            c: 1,
            dims: tape.dims,
            data: dloss_dout.to_vec(),
        };
        let mut d = conv_backward(th, &mut grad, &layout.head, tape.head, &dy);
        let levels = self.arch.levels();
        let mut dskips = Vec::new();
        let mut dec = tape.decoder;
        let mut up = tape.up;
        for i in (0..levels - 1).rev() {
            let caches = std::mem::take(&mut dec[i]);
            for (s, c) in layout.decoder[i].iter().zip(caches).rev() {
                d = block_backward(th, &mut grad, s, c, d);
            }
            let (dup, dskip) = split(d, layout.up[i].cout);
            dskips.push(dskip);
            let c = up.pop().expect("one up cache per level");
            d = conv_backward(th, &mut grad, &layout.up[i], c, &upsample_backward(&dup));
        }
        let mut enc = tape.encoder;
        let mut down = tape.down;
        for l in (0..levels).rev() {
            if l + 1 < levels {
                let (c, dims) = down.pop().expect("one down cache per level");
                let dfold = conv_backward(th, &mut grad, &layout.down[l], c, &d);
                d = channel_to_space(&dfold, dims);
                d.add_assign(&dskips[l]);
            }
            let caches = std::mem::take(&mut enc[l]);
            for (s, c) in layout.encoder[l].iter().zip(caches).rev() {
                d = block_backward(th, &mut grad, s, c, d);
            }
        }
        conv_backward(th, &mut grad, &layout.stem, tape.stem, &d);
        let out: Vec<f64> = grad.iter().map(|g| g.to_f64().unwrap_or(f64::NAN)).collect();
        if out.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(out)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"EFCK";
const CKPT_VERSION: u16 = 1;

/// `magic | u16 version | u32 descriptor length | descriptor JSON | u64 count
/// | count × f64`, little-endian.
pub fn encode_checkpoint(f: &VelocityField) -> Vec<u8> {
    let desc = serde_json::to_vec(&f.arch).expect("architecture serializes");
    let mut out = Vec::with_capacity(18 + desc.len() + 8 * f.params.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    out.extend_from_slice(&(f.params.len() as u64).to_le_bytes());
    for p in &f.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Decodes a checkpoint; when `expected` is given the stored descriptor must
/// match it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&FieldArch>) -> Result<VelocityField> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 10 || &bytes[..4] != CKPT_MAGIC {
        return Err(bad("not a field checkpoint".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let dlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = &bytes[10..];
    if body.len() < dlen + 8 {
        return Err(bad("truncated descriptor".into()));
    }
    let arch: FieldArch = serde_json::from_slice(&body[..dlen])
        .map_err(|e| bad(format!("descriptor: {e}")))?;
    if let Some(want) = expected {
        if *want != arch {
            return Err(bad(format!(
                "descriptor mismatch: file has {arch:?}, expected {want:?}"
            )));
        }
    }
    let count = u64::from_le_bytes(body[dlen..dlen + 8].try_into().unwrap()) as usize;
    let payload = &body[dlen + 8..];
    if payload.len() != 8 * count {
        return Err(bad(format!(
            "{} payload bytes for {count} parameters",
            payload.len()
        )));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VelocityField::new(arch, params).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(f: &VelocityField, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(f))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&FieldArch>) -> Result<VelocityField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
