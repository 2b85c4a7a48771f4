//! Post-sampling refinement: gradient ascent on the normalized
//! cross-correlation (or a kernel-density mutual information) between the
//! generated volume and the source it came from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMetric {
    Ncc,
    Mi,
    None,
}

/// How the step size is applied to the metric gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepScaling {
    /// `x += step · ∇`.
    Raw,
    /// `x += step · n · ∇` with `n` the number of voxels the metric sums
    /// over, so the update does not shrink as the volume grows.
    Voxels,
    /// `x += step · ∇ / rms(∇)`: every iteration moves the volume by `step`
    /// in root-mean-square intensity.
    Rms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub metric: RefineMetric,
    pub step_size: f64,
    /// Unset picks `Voxels` for NCC and `Rms` for MI.
    pub step_scaling: Option<StepScaling>,
    pub iterations: usize,
    pub mi_bins: usize,
    pub mi_sigma: f64,
    #[serde(skip)]
    pub mask: Option<Vec<bool>>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            metric: RefineMetric::Ncc,
            step_size: 0.02,
            step_scaling: None,
            iterations: 6,
            mi_bins: 256,
            mi_sigma: 0.01,
            mask: None,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("refinement: {m}")));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if self.mi_bins < 2 {
            return bad("mi_bins must be >= 2");
        }
        if !(self.mi_sigma > 0.0) {
            return bad("mi_sigma must be positive");
        }
        Ok(())
    }
}

fn same_dims(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "volumes {:?} and {:?} differ in shape",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_mask(mask: Option<&[bool]>, n: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != n => Err(Error::Shape(format!(
            "mask has {} voxels, volume has {n}",
            m.len()
        ))),
        Some(m) if !m.iter().any(|&b| b) => Err(Error::Degenerate("empty mask".into())),
        _ => Ok(()),
    }
}

fn inside(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

struct NccParts {
    da: Vec<f64>,
    db: Vec<f64>,
    saa: f64,
    sbb: f64,
    sab: f64,
}

fn ncc_parts(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<NccParts> {
    check_mask(mask, a.len())?;
    let (mut sa, mut sb, mut n) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        if inside(mask, i) {
            sa += a[i];
            sb += b[i];
            n += 1.0;
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; a.len()];
    for i in 0..a.len() {
        if inside(mask, i) {
            da[i] = a[i] - ma;
            db[i] = b[i] - mb;
            saa += da[i] * da[i];
            sbb += db[i] * db[i];
            sab += da[i] * db[i];
        }
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::Degenerate("zero variance inside the mask".into()));
    }
    Ok(NccParts {
        da,
        db,
        saa,
        sbb,
        sab,
    })
}

pub fn ncc_slices(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let p = ncc_parts(a, b, mask)?;
    Ok((p.sab / (p.saa * p.sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `Σ(a−ā)(b−b̄) / sqrt(Σ(a−ā)²·Σ(b−b̄)²)` over the mask.
pub fn ncc(a: &Volume3D, b: &Volume3D, mask: Option<&[bool]>) -> Result<f64> {
    same_dims(a, b)?;
    ncc_slices(&a.to_f64(), &b.to_f64(), mask)
}

/// Returns `(ncc(x, src), ∂ncc/∂x)`; the gradient is zero outside the mask.
pub fn ncc_with_gradient(x: &[f64], src: &[f64], mask: Option<&[bool]>) -> Result<(f64, Vec<f64>)> {
    let p = ncc_parts(x, src, mask)?;
    let root = (p.saa * p.sbb).sqrt();
    let c = p.sab / root;
    let k = p.sab / (p.saa * root);
    let g = p
        .da
        .iter()
        .zip(&p.db)
        .enumerate()
        .map(|(i, (a, b))| if inside(mask, i) { b / root - k * a } else { 0.0 })
        .collect();
    Ok((c, g))
}

pub fn grad_ncc(x: &Volume3D, src: &Volume3D, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    same_dims(x, src)?;
    Ok(ncc_with_gradient(&x.to_f64(), &src.to_f64(), mask)?.1)
}

fn bin_centers(bins: usize) -> Vec<f64> {
    (0..bins).map(|k| k as f64 / (bins - 1) as f64).collect()
}

/// `p_k ∝ Σ exp(−(x − c_k)² / 2σ²)` over the mask, bin centres uniform on
/// `[0, 1]`, normalized to sum 1.
pub fn kde_histogram(v: &Volume3D, bins: usize, sigma: f64, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if bins < 2 || !(sigma > 0.0) {
        return Err(Error::InvalidParam(format!(
            "histogram needs bins >= 2 and sigma > 0, got {bins} and {sigma}"
        )));
    }
    check_mask(mask, v.len())?;
    let centers = bin_centers(bins);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut p = vec![0.0; bins];
    for (i, &x) in v.data().iter().enumerate() {
        if inside(mask, i) {
            for (pk, c) in p.iter_mut().zip(&centers) {
                let d = x as f64 - c;
                *pk += (-d * d * inv).exp();
            }
        }
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate(
            "all intensities lie too far from the bin range".into(),
        ));
    }
    p.iter_mut().for_each(|q| *q /= total);
    Ok(p)
}

/// Per-voxel Parzen weights over a band of bins around the value.
struct Kernel {
    centers: Vec<f64>,
    inv2s2: f64,
    sigma2: f64,
    reach: usize,
}

/// Truncated kernel row: first bin, weights, derivatives of the weights.
struct Row {
    lo: usize,
    w: Vec<f64>,
    dw: Vec<f64>,
}

impl Kernel {
    fn new(bins: usize, sigma: f64) -> Self {
        let spacing = 1.0 / (bins - 1) as f64;
        Self {
            centers: bin_centers(bins),
            inv2s2: 1.0 / (2.0 * sigma * sigma),
            sigma2: sigma * sigma,
            reach: ((6.0 * sigma / spacing).ceil() as usize).max(1),
        }
    }

    /// Weights normalized to sum 1 per voxel, and their derivatives in `x`.
    fn row(&self, x: f64) -> Row {
        let bins = self.centers.len();
        let near = (x.clamp(0.0, 1.0) * (bins - 1) as f64).round() as usize;
        let lo = near.saturating_sub(self.reach);
        let hi = (near + self.reach).min(bins - 1);
        let top = self.centers[lo..=hi]
            .iter()
            .map(|c| -(x - c) * (x - c) * self.inv2s2)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut e = Vec::with_capacity(hi - lo + 1);
        let mut de = Vec::with_capacity(hi - lo + 1);
        for c in &self.centers[lo..=hi] {
            let d = x - c;
            let v = (-d * d * self.inv2s2 - top).exp();
            e.push(v);
            de.push(-d / self.sigma2 * v);
        }
        let s: f64 = e.iter().sum();
        let ds: f64 = de.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / s).collect();
        let dw = w.iter().zip(&de).map(|(w, d)| (d - w * ds) / s).collect();
        Row { lo, w, dw }
    }
}

struct Joint {
    bins: usize,
    p: Vec<f64>,
    px: Vec<f64>,
    ps: Vec<f64>,
}

fn joint_histogram(x: &[f64], src: &[f64], k: &Kernel, mask: Option<&[bool]>) -> Result<(Joint, Vec<Row>, Vec<Row>)> {
    check_mask(mask, x.len())?;
    let bins = k.centers.len();
    let idx: Vec<usize> = (0..x.len()).filter(|&i| inside(mask, i)).collect();
    let n = idx.len() as f64;
    let xr: Vec<Row> = idx.iter().map(|&i| k.row(x[i])).collect();
    let sr: Vec<Row> = idx.iter().map(|&i| k.row(src[i])).collect();
    let mut p = vec![0.0; bins * bins];
    for (a, b) in xr.iter().zip(&sr) {
        for (u, wa) in a.w.iter().enumerate() {
            let row = &mut p[(a.lo + u) * bins..(a.lo + u + 1) * bins];
            for (v, wb) in b.w.iter().enumerate() {
                row[b.lo + v] += wa * wb / n;
            }
        }
    }
    let mut px = vec![0.0; bins];
    let mut ps = vec![0.0; bins];
    for r in 0..bins {
        for c in 0..bins {
            px[r] += p[r * bins + c];
            ps[c] += p[r * bins + c];
        }
    }
    Ok((Joint { bins, p, px, ps }, xr, sr))
}

fn mi_of(j: &Joint) -> f64 {
    let mut mi = 0.0;
    for r in 0..j.bins {
        for c in 0..j.bins {
            let v = j.p[r * j.bins + c];
            if v > 0.0 {
                mi += v * (v / (j.px[r] * j.ps[c])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mutual information of the joint Parzen histogram of `(x, src)`.
pub fn mutual_information(x: &[f64], src: &[f64], bins: usize, sigma: f64, mask: Option<&[bool]>) -> Result<f64> {
    if x.len() != src.len() {
        return Err(Error::Shape("mutual information needs equal lengths".into()));
    }
    Ok(mi_of(&joint_histogram(x, src, &Kernel::new(bins, sigma), mask)?.0))
}

/// MI and its gradient in `x`, holding the source histogram fixed.
pub fn mi_with_gradient(
    x: &[f64],
    src: &[f64],
    bins: usize,
    sigma: f64,
    mask: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    if x.len() != src.len() {
        return Err(Error::Shape("mutual information needs equal lengths".into()));
    }
    let k = Kernel::new(bins, sigma);
    let (j, xr, sr) = joint_histogram(x, src, &k, mask)?;
    // ∂MI/∂p_rc = ln(p_rc / p_r) with p_r the x marginal.
    let g: Vec<f64> = (0..bins * bins)
        .map(|rc| {
            let v = j.p[rc];
            if v > 0.0 {
                (v / j.px[rc / bins]).ln()
            } else {
                0.0
            }
        })
        .collect();
    let n = xr.len() as f64;
    let mut grad = vec![0.0; x.len()];
    let idx = (0..x.len()).filter(|&i| inside(mask, i));
    for ((i, a), b) in idx.zip(&xr).zip(&sr) {
        let mut s = 0.0;
        for (u, da) in a.dw.iter().enumerate() {
            let row = &g[(a.lo + u) * bins..(a.lo + u + 1) * bins];
            let mut t = 0.0;
            for (v, wb) in b.w.iter().enumerate() {
                t += wb * row[b.lo + v];
            }
            s += da * t;
        }
        grad[i] = s / n;
    }
    Ok((mi_of(&j), grad))
}

/// The refined volume and the metric before the first and after each
/// iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub volume: Volume3D,
    pub trace: Vec<f64>,
}

fn ascend(
    x_init: &Volume3D,
    src: &Volume3D,
    cfg: &RefineConfig,
    scaling: StepScaling,
    metric: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<Refined> {
    cfg.validate()?;
    same_dims(x_init, src)?;
    let mut x = x_init.to_f64();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let active = match &cfg.mask {
        Some(m) => m.iter().filter(|&&b| b).count(),
        None => x.len(),
    };
    let (mut value, mut grad) = metric(&x)?;
    trace.push(value);
    for _ in 0..cfg.iterations {
        let scale = match scaling {
            StepScaling::Raw => cfg.step_size,
            StepScaling::Voxels => cfg.step_size * active as f64,
            StepScaling::Rms => {
                let rms = (grad.iter().map(|g| g * g).sum::<f64>() / grad.len() as f64).sqrt();
                if rms > 0.0 {
                    cfg.step_size / rms
                } else {
                    0.0
                }
            }
        };
        for (v, g) in x.iter_mut().zip(&grad) {
            *v += scale * g;
        }
        (value, grad) = metric(&x)?;
        trace.push(value);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("refined volume".into()));
    }
    Ok(Refined {
        volume: x_init.with_data(x.iter().map(|&v| v as f32).collect())?,
        trace,
    })
}

pub fn refine_ncc(x_init: &Volume3D, src: &Volume3D, cfg: &RefineConfig) -> Result<Refined> {
    let s = src.to_f64();
    let mask = cfg.mask.as_deref();
    ascend(x_init, src, cfg, cfg.step_scaling.unwrap_or(StepScaling::Voxels), |x| ncc_with_gradient(x, &s, mask))
}

pub fn refine_mi(x_init: &Volume3D, src: &Volume3D, cfg: &RefineConfig) -> Result<Refined> {
    let s = src.to_f64();
    let mask = cfg.mask.as_deref();
    ascend(x_init, src, cfg, cfg.step_scaling.unwrap_or(StepScaling::Rms), |x| {
        mi_with_gradient(x, &s, cfg.mi_bins, cfg.mi_sigma, mask)
    })
}

/// Dispatches on `cfg.metric`; `None` returns the input with an empty trace.
pub fn refine(x_init: &Volume3D, src: &Volume3D, cfg: &RefineConfig) -> Result<Refined> {
    match cfg.metric {
        RefineMetric::Ncc => refine_ncc(x_init, src, cfg),
        RefineMetric::Mi => refine_mi(x_init, src, cfg),
        RefineMetric::None => {
            same_dims(x_init, src)?;
            Ok(Refined {
                volume: x_init.clone(),
                trace: Vec::new(),
            })
        }
    }
}
