//! Image fidelity and downstream proxy metrics: PSNR, windowed 3D SSIM,
//! Dice overlap and mean absolute error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_kernel;
use crate::volume::{threshold_mask, voxel_count, Dims, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub peak: f64,
    /// Evaluate inside `threshold_mask(truth, mask_fraction)`; `None` uses
    /// every voxel.
    pub mask_fraction: Option<f64>,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            peak: 1.0,
            mask_fraction: Some(0.05),
            ssim_window: 7,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn check_pair(a: &Volume3D, b: &Volume3D, mask: Option<&[bool]>) -> Result<usize> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "volumes {:?} and {:?} differ in shape",
            a.dims(),
            b.dims()
        )));
    }
    match mask {
        Some(m) if m.len() != a.len() => Err(Error::Shape(format!(
            "mask has {} voxels, volume has {}",
            m.len(),
            a.len()
        ))),
        Some(m) => match m.iter().filter(|&&b| b).count() {
            0 => Err(Error::Degenerate("empty mask".into())),
            n => Ok(n),
        },
        None => Ok(a.len()),
    }
}

/// Mean squared difference over the mask.
pub fn mse(a: &Volume3D, b: &Volume3D, mask: Option<&[bool]>) -> Result<f64> {
    let n = check_pair(a, b, mask)?;
    let mut s = 0.0;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            let d = (*x - *y) as f64;
            s += d * d;
        }
    }
    Ok(s / n as f64)
}

/// `10·log10(peak² / MSE)`; `f64::INFINITY` when the volumes agree.
pub fn psnr(a: &Volume3D, b: &Volume3D, mask: Option<&[bool]>, peak: f64) -> Result<f64> {
    let m = mse(a, b, mask)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Valid-mode separable filtering: output dims shrink by `taps.len() - 1`.
fn filter_valid(src: &[f64], dims: Dims, taps: &[f64]) -> (Vec<f64>, Dims) {
    let w = taps.len();
    let mut cur = src.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let mut nd = d;
        nd[axis] = d[axis] + 1 - w;
        let stride: usize = d[axis + 1..].iter().product();
        let outer: usize = d[..axis].iter().product();
        let mut out = vec![0.0; voxel_count(nd)];
        for o in 0..outer {
            for p in 0..nd[axis] {
                for s in 0..stride {
                    let mut acc = 0.0;
                    for (t, &c) in taps.iter().enumerate() {
                        acc += c * cur[(o * d[axis] + p + t) * stride + s];
                    }
                    out[(o * nd[axis] + p) * stride + s] = acc;
                }
            }
        }
        cur = out;
        d = nd;
    }
    (cur, d)
}

/// Mean local SSIM over window centres that lie inside the mask and whose
/// window fits in the volume.
pub fn ssim3d(a: &Volume3D, b: &Volume3D, mask: Option<&[bool]>, cfg: &MetricsConfig) -> Result<f64> {
    check_pair(a, b, mask)?;
    let dims = a.dims();
    let w = cfg.ssim_window;
    if w == 0 || w % 2 == 0 {
        return Err(Error::InvalidParam(format!("SSIM window {w} must be odd")));
    }
    if dims.iter().any(|&d| d < w) {
        return Err(Error::Shape(format!(
            "SSIM window {w} does not fit in volume {dims:?}"
        )));
    }
    let taps = gaussian_kernel(cfg.ssim_sigma, w / 2);
    let x = a.to_f64();
    let y = b.to_f64();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, vd) = filter_valid(&x, dims, &taps);
    let (my, _) = filter_valid(&y, dims, &taps);
    let (sxx, _) = filter_valid(&xx, dims, &taps);
    let (syy, _) = filter_valid(&yy, dims, &taps);
    let (sxy, _) = filter_valid(&xy, dims, &taps);
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let r = w / 2;
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..vd[0] {
        for j in 0..vd[1] {
            for k in 0..vd[2] {
                let centre = ((i + r) * dims[1] + j + r) * dims[2] + k + r;
                if !mask.is_none_or(|m| m[centre]) {
                    continue;
                }
                let at = (i * vd[1] + j) * vd[2] + k;
                let (ux, uy) = (mx[at], my[at]);
                let vx = sxx[at] - ux * ux;
                let vy = syy[at] - uy * uy;
                let cxy = sxy[at] - ux * uy;
                total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no SSIM window centre inside the mask".into()));
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// `2|A∩B| / (|A| + |B|)` for one label; 1 when both are empty.
pub fn dice(a: &[u16], b: &[u16], label: u16) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "segmentations have {} and {} voxels",
            a.len(),
            b.len()
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (p, q) = (x == label, y == label);
        na += p as usize;
        nb += q as usize;
        both += (p && q) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "need equal non-empty lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Labels each voxel by how many of the ascending `cuts` it exceeds.
pub fn threshold_segmentation(v: &Volume3D, cuts: &[f64]) -> Result<Vec<u16>> {
    if cuts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParam("segmentation cuts must ascend".into()));
    }
    Ok(v.data()
        .iter()
        .map(|&x| cuts.partition_point(|&c| (x as f64) > c) as u16)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` together with `psnr_infinite` when the volumes agree.
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<BTreeMap<u16, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    pub mask_voxels: usize,
}

impl MetricsReport {
    pub fn psnr_value(&self) -> f64 {
        self.psnr.unwrap_or(f64::INFINITY)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// PSNR and SSIM of `pred` against `truth` inside the configured mask.
pub fn evaluate(pred: &Volume3D, truth: &Volume3D, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let mask = cfg.mask_fraction.map(|f| threshold_mask(truth, f)).transpose()?;
    let mask = mask.as_deref();
    let mask_voxels = check_pair(pred, truth, mask)?;
    let p = psnr(pred, truth, mask, cfg.peak)?;
    let ssim = ssim3d(pred, truth, mask, cfg)?;
    Ok(MetricsReport {
        psnr: p.is_finite().then_some(p),
        psnr_infinite: p.is_infinite(),
        ssim,
        dice: None,
        mae: None,
        mask_voxels,
    })
}

/// Adds per-label Dice between two segmentations.
pub fn with_dice(mut report: MetricsReport, a: &[u16], b: &[u16]) -> Result<MetricsReport> {
    let mut labels: Vec<u16> = a.iter().chain(b).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    let mut map = BTreeMap::new();
    for l in labels {
        map.insert(l, dice(a, b, l)?);
    }
    report.dice = Some(map);
    Ok(report)
}

/// One CSV row per named report: `name,psnr,ssim,mask_voxels`.
pub fn reports_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("name,psnr,ssim,mask_voxels\n");
    for (name, r) in rows {
        let p = r.psnr.map_or("inf".to_string(), |v| format!("{v:.6}"));
        s.push_str(&format!("{name},{p},{:.6},{}\n", r.ssim, r.mask_voxels));
    }
    s
}
