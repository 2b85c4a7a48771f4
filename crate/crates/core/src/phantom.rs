//! Synthetic traveling subjects.
//!
//! One random anatomy (nested folded shells plus interior blobs) is rendered
//! under several monotone contrast functions, each with its own smooth
//! multiplicative bias field and noise level. Every domain render shares the
//! same label volume, so the renders differ in contrast but not in edges.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_smooth;
use crate::volume::{
    load_volume, normalize_percentile, save_volume, voxel_count, write_atomic, Dims, Volume3D,
    VolumeFormat,
};

/// Integer tissue labels on a voxel grid; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub labels: Vec<u16>,
}

impl LabelVolume {
    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(self.dims, self.labels.iter().map(|&l| l as f32).collect())
            .expect("label dims are valid")
    }

    pub fn from_volume(v: &Volume3D) -> Result<Self> {
        let labels = v
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 && x <= u16::MAX as f32 {
                    Ok(x as u16)
                } else {
                    Err(Error::format("labels", format!("non-integer label {x}")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dims: v.dims(),
            labels,
        })
    }

    /// Voxels carrying `label`.
    pub fn region(&self, label: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// The first `shell_scales.len()` shapes are the head and its nested
    /// shells; the rest are interior blobs.
    pub n_shapes: usize,
    /// Base intensity per shape, reused cyclically when shorter than
    /// `n_shapes`.
    pub tissue_levels: Vec<f64>,
    /// Mean head semi-axis as a fraction of each dimension.
    pub head_scale: f64,
    /// Radii of the nested shells relative to the head, outermost first; the
    /// head itself is the first entry.
    pub shell_scales: Vec<f64>,
    /// Relative radial amplitude of the folds on the inner shells.
    pub fold_amplitude: f64,
    /// Partial-volume blur applied to the piecewise-constant rendering.
    pub partial_volume_sigma: f64,
    /// Adds a small hyperintense blob inside the innermost shell.
    pub lesion: bool,
    pub lesion_level: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            n_shapes: 6,
            tissue_levels: vec![0.25, 0.5, 0.75, 0.25, 0.5],
            head_scale: 0.40,
            shell_scales: vec![1.0, 0.8, 0.56],
            fold_amplitude: 0.03,
            partial_volume_sigma: 0.5,
            lesion: false,
            lesion_level: 0.98,
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    /// A coarser anatomy sized for 32³ grids: head, one inner shell and a
    /// single blob, keeping boundaries several voxels apart.
    pub fn desk32() -> Self {
        Self {
            dims: [32, 32, 32],
            n_shapes: 3,
            head_scale: 0.355,
            shell_scales: vec![1.0, 0.6],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_shapes == 0 {
            return Err(Error::InvalidParam("n_shapes must be >= 1".into()));
        }
        if !(self.head_scale > 0.05 && self.head_scale <= 0.48) {
            return Err(Error::InvalidParam(format!("head_scale {}", self.head_scale)));
        }
        if self.shell_scales.first() != Some(&1.0)
            || self.shell_scales.windows(2).any(|w| !(w[1] > 0.0 && w[1] < w[0]))
        {
            return Err(Error::InvalidParam(
                "shell_scales must start at 1 and strictly decrease".into(),
            ));
        }
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::InvalidParam(format!("dims {:?} too small", self.dims)));
        }
        if self.tissue_levels.is_empty()
            || self
                .tissue_levels
                .iter()
                .chain(std::iter::once(&self.lesion_level))
                .any(|&l| !(l > 0.0 && l < 1.0))
        {
            return Err(Error::InvalidParam("tissue levels must lie in (0,1)".into()));
        }
        Ok(())
    }

    /// Label carried by the injected lesion.
    pub fn lesion_label(&self) -> u16 {
        self.n_shapes as u16 + 1
    }

    fn level(&self, label: u16) -> f64 {
        if label == 0 {
            0.0
        } else if self.lesion && label == self.lesion_label() {
            self.lesion_level
        } else {
            self.tissue_levels[(label as usize - 1) % self.tissue_levels.len()]
        }
    }
}

/// The shared anatomy of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    pub labels: LabelVolume,
    /// Tissue levels painted by label, before partial-volume blur.
    pub piecewise: Volume3D,
    /// Blurred rendering; the input to every contrast function.
    pub clean: Volume3D,
}

struct Shape {
    center: [f64; 3],
    radii: [f64; 3],
    folds: Vec<([f64; 3], f64)>,
    fold_amplitude: f64,
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        let q = [
            (p[0] - self.center[0]) / self.radii[0],
            (p[1] - self.center[1]) / self.radii[1],
            (p[2] - self.center[2]) / self.radii[2],
        ];
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if self.folds.is_empty() || rho == 0.0 {
            return rho <= 1.0;
        }
        let u = [q[0] / rho, q[1] / rho, q[2] / rho];
        let wobble: f64 = self
            .folds
            .iter()
            .map(|(k, phase)| {
                (std::f64::consts::PI * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2]) + phase).sin()
            })
            .sum::<f64>()
            / (self.folds.len() as f64).sqrt();
        rho <= 1.0 + self.fold_amplitude * wobble
    }
}

fn random_folds(rng: &mut impl Rng, count: usize) -> Vec<([f64; 3], f64)> {
    (0..count)
        .map(|_| {
            let k = [
                rng.random_range(-4i32..=4) as f64,
                rng.random_range(-4i32..=4) as f64,
                rng.random_range(2i32..=5) as f64,
            ];
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect()
}

pub fn generate_structure(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<Structure> {
    spec.validate()?;
    let dims = spec.dims;
    let d = [dims[0] as f64, dims[1] as f64, dims[2] as f64];
    let mid = [(d[0] - 1.0) / 2.0, (d[1] - 1.0) / 2.0, (d[2] - 1.0) / 2.0];

    let mut shapes = Vec::with_capacity(spec.n_shapes);
    let head_center = [
        mid[0] + rng.random_range(-0.02..0.02) * d[0],
        mid[1] + rng.random_range(-0.02..0.02) * d[1],
        mid[2] + rng.random_range(-0.02..0.02) * d[2],
    ];
    let hs = spec.head_scale;
    let head_radii = [
        rng.random_range(hs - 0.01..hs + 0.01) * d[0],
        rng.random_range(hs - 0.01..hs + 0.01) * d[1],
        rng.random_range(hs - 0.01..hs + 0.01) * d[2],
    ];
    let n_shells = spec.shell_scales.len().min(spec.n_shapes);
    for (s, scale) in spec.shell_scales.iter().enumerate().take(n_shells) {
        let folded = s > 0 && spec.fold_amplitude > 0.0;
        shapes.push(Shape {
            center: head_center,
            radii: head_radii.map(|r| r * scale),
            folds: if folded {
                random_folds(rng, 6)
            } else {
                Vec::new()
            },
            fold_amplitude: spec.fold_amplitude * s as f64,
        });
    }
    let core = shapes.last().map(|s| s.radii).unwrap_or(head_radii);
    for _ in n_shells..spec.n_shapes {
        let center = [
            head_center[0] + rng.random_range(-0.35..0.35) * core[0],
            head_center[1] + rng.random_range(-0.35..0.35) * core[1],
            head_center[2] + rng.random_range(-0.35..0.35) * core[2],
        ];
        let radii = [
            rng.random_range(0.06..0.1) * d[0],
            rng.random_range(0.06..0.1) * d[1],
            rng.random_range(0.06..0.1) * d[2],
        ];
        shapes.push(Shape {
            center,
            radii,
            folds: random_folds(rng, 3),
            fold_amplitude: 0.15,
        });
    }
    if spec.lesion {
        let center = [
            head_center[0] + rng.random_range(-0.3..0.3) * core[0],
            head_center[1] + rng.random_range(-0.3..0.3) * core[1],
            head_center[2] + rng.random_range(-0.3..0.3) * core[2],
        ];
        let r = 0.07 * d.iter().copied().fold(f64::INFINITY, f64::min);
        shapes.push(Shape {
            center,
            radii: [r.max(1.5); 3],
            folds: Vec::new(),
            fold_amplitude: 0.0,
        });
    }

    let mut labels = vec![0u16; voxel_count(dims)];
    let mut idx = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i as f64, j as f64, k as f64];
                // Later shapes take priority.
                if let Some(s) = shapes.iter().rposition(|s| s.contains(p)) {
                    labels[idx] = if spec.lesion && s == shapes.len() - 1 {
                        spec.lesion_label()
                    } else {
                        s as u16 + 1
                    };
                }
                idx += 1;
            }
        }
    }
    let painted: Vec<f64> = labels.iter().map(|&l| spec.level(l)).collect();
    let blurred = gaussian_smooth(&painted, dims, spec.partial_volume_sigma);
    Ok(Structure {
        labels: LabelVolume { dims, labels },
        piecewise: Volume3D::from_f64(dims, &painted)?,
        clean: Volume3D::from_f64(dims, &blurred)?,
    })
}

/// Domain appearance: monotone intensity map, smooth bias, additive noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastFunction {
    pub name: String,
    /// Piecewise-linear `(input, output)` control points; strictly increasing
    /// in both coordinates, first input 0, last input 1.
    pub intensity_map: Vec<[f64; 2]>,
    /// Coefficients of x, y, z, x², y², z², xy, xz, yz over coordinates
    /// normalized to [-1, 1]; the bias field is `exp(amplitude · poly)`.
    pub bias_coefficients: [f64; 9],
    pub bias_amplitude: f64,
    pub noise_sigma: f64,
}

impl ContrastFunction {
    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            intensity_map: vec![[0.0, 0.0], [1.0, 1.0]],
            bias_coefficients: [0.0; 9],
            bias_amplitude: 0.0,
            noise_sigma: 0.0,
        }
    }

    /// Reference domain used by the examples and acceptance suite.
    pub fn target_preset() -> Self {
        Self {
            name: "target".into(),
            intensity_map: vec![[0.0, 0.0], [0.25, 0.25], [0.5, 0.5], [0.75, 0.75], [1.0, 1.0]],
            bias_coefficients: [0.4, -0.3, 0.2, -0.2, 0.1, -0.1, 0.1, 0.0, -0.1],
            bias_amplitude: 0.1,
            noise_sigma: 0.0,
        }
    }

    /// Bright fluid and grey matter, compressed grey/white contrast.
    pub fn source_compressed() -> Self {
        Self {
            name: "compressed".into(),
            intensity_map: vec![[0.0, 0.0], [0.25, 0.45], [0.5, 0.65], [0.75, 0.8], [1.0, 1.0]],
            bias_coefficients: [-0.5, 0.4, 0.3, 0.3, -0.2, 0.2, -0.2, 0.1, 0.2],
            bias_amplitude: 0.2,
            noise_sigma: 0.0,
        }
    }

    /// Dark fluid and grey matter, bright white matter.
    pub fn source_expanded() -> Self {
        Self {
            name: "expanded".into(),
            intensity_map: vec![[0.0, 0.0], [0.25, 0.1], [0.5, 0.3], [0.75, 0.75], [1.0, 1.0]],
            bias_coefficients: [0.2, 0.3, -0.4, 0.1, 0.2, -0.3, 0.0, 0.2, 0.1],
            bias_amplitude: 0.2,
            noise_sigma: 0.0,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias_amplitude = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let pts = &self.intensity_map;
        if pts.len() < 2 || pts[0][0] != 0.0 || pts[pts.len() - 1][0] != 1.0 {
            return Err(Error::InvalidParam(format!(
                "contrast '{}' must span inputs 0..1",
                self.name
            )));
        }
        if pts.windows(2).any(|w| !(w[1][0] > w[0][0] && w[1][1] > w[0][1])) {
            return Err(Error::InvalidParam(format!(
                "contrast '{}' is not strictly increasing",
                self.name
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.bias_amplitude.is_finite() {
            return Err(Error::InvalidParam(format!("contrast '{}' noise/bias", self.name)));
        }
        Ok(())
    }

    /// The monotone map, extended linearly past the end points.
    pub fn map_intensity(&self, x: f64) -> f64 {
        let pts = &self.intensity_map;
        let seg = pts
            .windows(2)
            .position(|w| x <= w[1][0])
            .unwrap_or(pts.len() - 2);
        let (a, b) = (pts[seg], pts[seg + 1]);
        a[1] + (x - a[0]) * (b[1] - a[1]) / (b[0] - a[0])
    }

    pub fn bias_at(&self, dims: Dims, i: usize, j: usize, k: usize) -> f64 {
        let n = |t: usize, d: usize| {
            if d > 1 {
                2.0 * t as f64 / (d - 1) as f64 - 1.0
            } else {
                0.0
            }
        };
        let (x, y, z) = (n(i, dims[0]), n(j, dims[1]), n(k, dims[2]));
        let c = &self.bias_coefficients;
        let poly = c[0] * x
            + c[1] * y
            + c[2] * z
            + c[3] * x * x
            + c[4] * y * y
            + c[5] * z * z
            + c[6] * x * y
            + c[7] * x * z
            + c[8] * y * z;
        (self.bias_amplitude * poly).exp()
    }
}

/// Applies a contrast to a structure and renormalizes to [0, 1] over the
/// 1st..99.9th percentiles.
pub fn render_domain(
    structure: &Structure,
    c: &ContrastFunction,
    rng: &mut impl Rng,
) -> Result<Volume3D> {
    c.validate()?;
    let dims = structure.clean.dims();
    let clean = structure.clean.data();
    let mut out = Vec::with_capacity(clean.len());
    let mut idx = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let mut v = c.map_intensity(clean[idx] as f64) * c.bias_at(dims, i, j, k);
                if c.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    v += c.noise_sigma * z;
                }
                out.push(v);
                idx += 1;
            }
        }
    }
    let raw = Volume3D::from_f64(dims, &out)?;
    Ok(normalize_percentile(&raw, 1.0, 99.9)?.0)
}

/// One traveling subject: shared labels, one target render, one render per
/// source contrast.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub seed: u64,
    pub labels: LabelVolume,
    pub target: Volume3D,
    pub sources: Vec<Volume3D>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Roughly 70/10/20, keeping at least one test subject when n >= 2.
    pub fn for_count(n: usize) -> Self {
        if n == 1 {
            return Split {
                train: vec![0],
                ..Default::default()
            };
        }
        let n_test = ((n as f64 * 0.2).round() as usize).max(1);
        let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_test - 1);
        let n_train = n - n_test - n_val;
        Split {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: PhantomSpec,
    pub target_contrast: ContrastFunction,
    pub source_contrasts: Vec<ContrastFunction>,
    pub subjects: Vec<Subject>,
    pub split: Split,
}

pub fn generate_subject(
    spec: &PhantomSpec,
    seed: u64,
    target: &ContrastFunction,
    sources: &[ContrastFunction],
) -> Result<Subject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let structure = generate_structure(spec, &mut rng)?;
    let target_vol = render_domain(&structure, target, &mut rng)?;
    let sources = sources
        .iter()
        .map(|c| render_domain(&structure, c, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Subject {
        seed,
        labels: structure.labels,
        target: target_vol,
        sources,
    })
}

pub fn generate_corpus(
    spec: &PhantomSpec,
    n_subjects: usize,
    target: &ContrastFunction,
    sources: &[ContrastFunction],
    rng: &mut impl Rng,
) -> Result<Corpus> {
    if n_subjects == 0 {
        return Err(Error::InvalidParam("n_subjects must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..n_subjects).map(|_| rng.random()).collect();
    let subjects = seeds
        .iter()
        .map(|&s| generate_subject(spec, s, target, sources))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        spec: spec.clone(),
        target_contrast: target.clone(),
        source_contrasts: sources.to_vec(),
        subjects,
        split: Split::for_count(n_subjects),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    id: String,
    seed: u64,
    labels: String,
    target: String,
    sources: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    spec: PhantomSpec,
    target_contrast: ContrastFunction,
    source_contrasts: Vec<ContrastFunction>,
    subjects: Vec<SubjectEntry>,
    split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Corpus {
    /// Writes `subject_NNN/{labels,target,source_K}.hvol` plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut entries = Vec::with_capacity(self.subjects.len());
        for (s, subject) in self.subjects.iter().enumerate() {
            let id = format!("subject_{s:03}");
            let sub = dir.join(&id);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let rel = |name: &str| format!("{id}/{name}");
            save_volume(&subject.labels.to_volume(), sub.join("labels.hvol"))?;
            save_volume(&subject.target, sub.join("target.hvol"))?;
            let mut sources = Vec::new();
            for (k, v) in subject.sources.iter().enumerate() {
                let name = format!("source_{k}.hvol");
                save_volume(v, sub.join(&name))?;
                sources.push(rel(&name));
            }
            entries.push(SubjectEntry {
                id: id.clone(),
                seed: subject.seed,
                labels: rel("labels.hvol"),
                target: rel("target.hvol"),
                sources,
            });
        }
        let manifest = Manifest {
            version: 1,
            spec: self.spec.clone(),
            target_contrast: self.target_contrast.clone(),
            source_contrasts: self.source_contrasts.clone(),
            subjects: entries,
            split: self.split.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), &json)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path: PathBuf = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format("corpus manifest", e.to_string()))?;
        let subjects = m
            .subjects
            .iter()
            .map(|e| {
                Ok(Subject {
                    seed: e.seed,
                    labels: LabelVolume::from_volume(&load_volume(
                        dir.join(&e.labels),
                        VolumeFormat::RawV1,
                    )?)?,
                    target: load_volume(dir.join(&e.target), VolumeFormat::RawV1)?,
                    sources: e
                        .sources
                        .iter()
                        .map(|p| load_volume(dir.join(p), VolumeFormat::RawV1))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            spec: m.spec,
            target_contrast: m.target_contrast,
            source_contrasts: m.source_contrasts,
            subjects,
            split: m.split,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [20, 20, 20],
            ..Default::default()
        }
    }

    #[test]
    fn single_ball_is_two_level() {
        let spec = PhantomSpec {
            dims: [16, 16, 16],
            n_shapes: 1,
            fold_amplitude: 0.0,
            ..Default::default()
        };
        let s = generate_structure(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut seen: Vec<u16> = s.labels.labels.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![0, 1]);
        let mut levels: Vec<f32> = s.piecewise.data().to_vec();
        levels.sort_by(f32::total_cmp);
        levels.dedup();
        assert_eq!(levels.len(), 2);
    }

    #[test]
    fn structure_is_seed_deterministic() {
        let spec = small_spec();
        let a = generate_structure(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = generate_structure(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = generate_structure(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn label_boundaries_are_intensity_steps() {
        let spec = small_spec();
        let s = generate_structure(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let d = spec.dims;
        let l = &s.labels.labels;
        let p = s.piecewise.data();
        for i in 0..d[0] {
            for j in 0..d[1] {
                for k in 0..d[2] - 1 {
                    let a = crate::volume::linear_index(d, i, j, k);
                    let b = a + 1;
                    let label_step = l[a] != l[b];
                    let intensity_step = p[a] != p[b];
                    // Distinct labels may share a cyclic level, never the reverse.
                    assert!(!intensity_step || label_step);
                    if label_step && spec.level(l[a]) != spec.level(l[b]) {
                        assert!(intensity_step);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_contrast_reproduces_clean_structure() {
        let s = generate_structure(&small_spec(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let r = render_domain(&s, &ContrastFunction::identity(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let expect = normalize_percentile(&s.clean, 1.0, 99.9).unwrap().0;
        for (a, b) in r.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn monotone_contrasts_preserve_voxel_order() {
        let s = generate_structure(&small_spec(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let a = ContrastFunction::target_preset();
        let b = ContrastFunction::source_expanded();
        let clean = s.clean.to_f64();
        let mut order: Vec<usize> = (0..clean.len()).collect();
        order.sort_by(|&x, &y| clean[x].total_cmp(&clean[y]));
        for w in order.windows(2) {
            let (x, y) = (clean[w[0]], clean[w[1]]);
            assert!(a.map_intensity(x) <= a.map_intensity(y));
            assert!(b.map_intensity(x) <= b.map_intensity(y));
        }
    }

    #[test]
    fn rejects_non_monotone_contrast() {
        let mut c = ContrastFunction::identity();
        c.intensity_map = vec![[0.0, 0.5], [0.5, 0.4], [1.0, 1.0]];
        assert!(c.validate().is_err());
        assert!(PhantomSpec {
            n_shapes: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn labels_are_domain_free_and_corpus_round_trips() {
        let spec = PhantomSpec {
            dims: [12, 12, 12],
            ..Default::default()
        };
        let corpus = generate_corpus(
            &spec,
            1,
            &ContrastFunction::target_preset(),
            &[ContrastFunction::source_compressed()],
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        assert_eq!(corpus.subjects.len(), 1);
        assert_eq!(corpus.subjects[0].sources.len(), 1);
        assert_ne!(corpus.subjects[0].target, corpus.subjects[0].sources[0]);

        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn lesion_label_is_present_when_requested() {
        let spec = PhantomSpec {
            dims: [24, 24, 24],
            lesion: true,
            ..Default::default()
        };
        let s = generate_structure(&spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let n = s
            .labels
            .labels
            .iter()
            .filter(|&&l| l == spec.lesion_label())
            .count();
        assert!(n > 0);
    }

    #[test]
    fn split_covers_all_subjects() {
        for n in 1..30 {
            let s = Split::for_count(n);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(!s.train.is_empty());
            if n >= 2 {
                assert!(!s.test.is_empty());
            }
        }
    }
}
