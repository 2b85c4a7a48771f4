//! Rectified flow: straight-line interpolation between noise and data, the
//! velocity regression loss, Adam training on patches, fixed-step ODE
//! sampling and full-volume harmonization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::edges::{adaptive_edge_detect, CannyConfig, EdgeMap};
use crate::error::{Error, Result};
use crate::field::{FieldInput, VelocityField};
use crate::patches::{normalized_coord, sample_batch, PatchSamplerConfig, TrainingPatch};
use crate::volume::{linear_index, voxel_count, Dims, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub rng_seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 8,
            steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            rng_seed: 0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("flow training: {m}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Midpoint,
    Euler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub solver: Solver,
    /// Kept for an adaptive solver; the fixed-step solvers ignore both.
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub rng_seed: u64,
    /// Largest padded volume evaluated in one pass.
    pub max_inference_voxels: usize,
    /// Above the limit, evaluate the field tile by tile instead of failing.
    pub tiled_fallback: bool,
    pub tile_size: usize,
    pub tile_overlap: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 16,
            solver: Solver::Midpoint,
            abs_tol: 5e-5,
            rel_tol: 5e-5,
            rng_seed: 0,
            max_inference_voxels: 128 * 128 * 128,
            tiled_fallback: false,
            tile_size: 64,
            tile_overlap: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("sampler: {m}")));
        if self.n_steps == 0 {
            return bad("n_steps must be >= 1");
        }
        if self.max_inference_voxels == 0 {
            return bad("max_inference_voxels must be >= 1");
        }
        if self.tile_size == 0 || self.tile_overlap >= self.tile_size {
            return bad("tile_overlap must be smaller than a positive tile_size");
        }
        Ok(())
    }
}

/// `t·x1 + (1 − t)·x0`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(Error::Shape(format!(
            "interpolation endpoints have {} and {} values",
            x0.len(),
            x1.len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParam(format!("time {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| t * b + (1.0 - t) * a).collect())
}

/// One noise/time draw for a patch.
#[derive(Clone, Debug)]
pub struct FlowDraw {
    pub t: f64,
    pub x0: Vec<f64>,
    pub x_t: Vec<f64>,
    /// `x1 − x0`.
    pub target: Vec<f64>,
}

pub fn draw_flow_sample(x1: &[f32], rng: &mut impl Rng) -> FlowDraw {
    let x0: Vec<f64> = (0..x1.len()).map(|_| rng.sample(StandardNormal)).collect();
    let t: f64 = rng.random();
    let x1: Vec<f64> = x1.iter().map(|&v| v as f64).collect();
    let x_t = interpolate(&x0, &x1, t).expect("matching lengths");
    let target = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
    FlowDraw { t, x0, x_t, target }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn squared_error(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, q)| {
            let d = p - q;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}

/// Velocity regression loss on one patch and its exact parameter gradient.
pub fn rectified_loss(
    f: &VelocityField,
    patch: &TrainingPatch,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>)> {
    let draw = draw_flow_sample(&patch.data, rng);
    let x_t: Vec<f32> = draw.x_t.iter().map(|&v| v as f32).collect();
    let edge = patch.edge_f32();
    let input = FieldInput {
        dims: patch.shape,
        x_t: &x_t,
        edge: &edge,
        coords: [&patch.coords[0], &patch.coords[1], &patch.coords[2]],
    };
    let (pred, tape) = f.forward_train(&input, draw.t)?;
    let pred: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let (loss, dpred) = squared_error(&pred, &draw.target);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at t = {}", draw.t)));
    }
    let dpred: Vec<f32> = dpred.iter().map(|&v| v as f32).collect();
    Ok((loss, f.backward(tape, &dpred)?))
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &FlowTrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Per-step batch mean losses, in order.
pub type LossTrace = Vec<f64>;

/// Trains `f` on target-domain volumes and their edge maps.
///
/// `observer` sees every step's mean loss and the updated field; it is where
/// callers write checkpoints and logs. Patch draws use the sampler's seed,
/// noise and times use the training seed.
pub fn train(
    mut f: VelocityField,
    volumes: &[Volume3D],
    edges: &[EdgeMap],
    cfg: &FlowTrainConfig,
    sampler: &PatchSamplerConfig,
    mut observer: impl FnMut(usize, f64, &VelocityField) -> Result<()>,
) -> Result<(VelocityField, LossTrace)> {
    cfg.validate()?;
    sampler.validate()?;
    let mut patch_rng = ChaCha8Rng::seed_from_u64(sampler.rng_seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut adam = Adam::new(f.param_count());
    let mut trace = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let batch = sample_batch(volumes, edges, sampler, &mut patch_rng, cfg.batch_size)?;
        let mut grad = vec![0.0; f.param_count()];
        let mut loss = 0.0;
        for patch in &batch {
            let (l, g) = rectified_loss(&f, patch, &mut noise_rng)?;
            loss += l * scale;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b * scale;
            }
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("training diverged at step {step}")));
        }
        adam.update(f.params_mut(), &grad, cfg);
        trace.push(loss);
        observer(step, loss, &f)?;
    }
    Ok((f, trace))
}

/// `step,loss` lines with a header.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l:.9e}\n"));
    }
    s
}

/// A time-dependent vector field over a flattened state.
pub trait Velocity {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> Velocity for F {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self(x, t))
    }
}

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("ODE state at t = {t}")));
    }
    Ok(())
}

fn axpy(x: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Integrates `dx/dt = v(x, t)` from 0 to 1 in `n_steps` fixed steps.
pub fn integrate(v: &impl Velocity, x0: Vec<f64>, cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let h = 1.0 / n as f64;
    let mut x = x0;
    for s in 0..n {
        let t = s as f64 / n as f64;
        let k1 = v.velocity(&x, t)?;
        if k1.len() != x.len() {
            return Err(Error::Shape(format!(
                "velocity has {} values for a state of {}",
                k1.len(),
                x.len()
            )));
        }
        x = match cfg.solver {
            Solver::Euler => axpy(&x, h, &k1),
            Solver::Midpoint => {
                let mid = axpy(&x, 0.5 * h, &k1);
                let k2 = v.velocity(&mid, t + 0.5 * h)?;
                axpy(&x, h, &k2)
            }
        };
        check_finite(&x, t + h)?;
    }
    Ok(x)
}

/// Standard normal start drawn from the sampler seed.
pub fn initial_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn sample(v: &impl Velocity, n: usize, cfg: &SamplerConfig) -> Result<Vec<f64>> {
    integrate(v, initial_noise(n, cfg.rng_seed), cfg)
}

/// Coordinate channels over `shape` voxels starting at `origin`, normalized
/// against `dims`. Positions past the end extend the same linear map.
fn coords_over(dims: Dims, origin: Dims, shape: Dims) -> [Vec<f32>; 3] {
    let n = voxel_count(shape);
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut idx = 0;
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let p = [origin[0] + i, origin[1] + j, origin[2] + k];
                for a in 0..3 {
                    out[a][idx] = normalized_coord(p[a], dims[a]);
                }
                idx += 1;
            }
        }
    }
    out
}

fn crop(src: &[f32], dims: Dims, origin: Dims, shape: Dims) -> Vec<f32> {
    let mut out = Vec::with_capacity(voxel_count(shape));
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            let at = linear_index(dims, origin[0] + i, origin[1] + j, origin[2]);
            out.extend_from_slice(&src[at..at + shape[2]]);
        }
    }
    out
}

/// Tile starts covering `0..dim` with windows of `size` overlapping by at
/// least `overlap`.
fn tile_starts(dim: usize, size: usize, overlap: usize) -> Vec<usize> {
    if dim <= size {
        return vec![0];
    }
    let step = size - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + size < dim).collect();
    starts.push(dim - size);
    starts
}

/// The trained field bound to one edge map and its coordinate grid.
pub struct ConditionedField<'a> {
    field: &'a VelocityField,
    dims: Dims,
    edge: Vec<f32>,
    coords: [Vec<f32>; 3],
    /// Tile edge length and overlap when evaluating tile by tile.
    tiles: Option<(usize, usize)>,
}

impl<'a> ConditionedField<'a> {
    /// `edge` and `coords` are laid out over `dims`, which must suit the
    /// field's downsampling.
    pub fn new(field: &'a VelocityField, dims: Dims, edge: Vec<f32>, coords: [Vec<f32>; 3]) -> Result<Self> {
        let n = voxel_count(dims);
        if edge.len() != n || coords.iter().any(|c| c.len() != n) {
            return Err(Error::Shape(format!("conditioning channels must hold {n} voxels")));
        }
        Ok(Self {
            field,
            dims,
            edge,
            coords,
            tiles: None,
        })
    }

    pub fn tiled(mut self, size: usize, overlap: usize) -> Result<Self> {
        let m = self.field.arch().size_multiple();
        if size % m != 0 || overlap >= size {
            return Err(Error::InvalidParam(format!(
                "tile size {size} must be a multiple of {m} and exceed overlap {overlap}"
            )));
        }
        self.tiles = Some((size, overlap));
        Ok(self)
    }

    fn eval_region(&self, x: &[f32], origin: Dims, shape: Dims, t: f64) -> Result<Vec<f32>> {
        let d = self.dims;
        let parts = [
            crop(x, d, origin, shape),
            crop(&self.edge, d, origin, shape),
            crop(&self.coords[0], d, origin, shape),
            crop(&self.coords[1], d, origin, shape),
            crop(&self.coords[2], d, origin, shape),
        ];
        self.field.forward(
            &FieldInput {
                dims: shape,
                x_t: &parts[0],
                edge: &parts[1],
                coords: [&parts[2], &parts[3], &parts[4]],
            },
            t,
        )
    }
}

impl Velocity for ConditionedField<'_> {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let Some((size, overlap)) = self.tiles else {
            let out = self.field.forward(
                &FieldInput {
                    dims: self.dims,
                    x_t: &x32,
                    edge: &self.edge,
                    coords: [&self.coords[0], &self.coords[1], &self.coords[2]],
                },
                t,
            )?;
            return Ok(out.into_iter().map(f64::from).collect());
        };
        let d = self.dims;
        let shape = d.map(|n| n.min(size));
        let starts: Vec<Vec<usize>> = (0..3).map(|a| tile_starts(d[a], size, overlap)).collect();
        let mut sum = vec![0.0f64; x.len()];
        let mut count = vec![0u32; x.len()];
        for &a in &starts[0] {
            for &b in &starts[1] {
                for &c in &starts[2] {
                    let origin = [a, b, c];
                    let out = self.eval_region(&x32, origin, shape, t)?;
                    let mut idx = 0;
                    for i in 0..shape[0] {
                        for j in 0..shape[1] {
                            let at = linear_index(d, a + i, b + j, c);
                            for k in 0..shape[2] {
                                sum[at + k] += out[idx] as f64;
                                count[at + k] += 1;
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
    }
}

/// Regenerates a volume from its edge map with full-volume coordinates.
/// The grid is padded up to the field's size multiple, integrated once over
/// the whole volume, then cropped and clamped to `[0, 1]`.
pub fn generate_from_edges(
    f: &VelocityField,
    edges: &EdgeMap,
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dims = edges.dims();
    let m = f.arch().size_multiple();
    let padded = dims.map(|d| d.div_ceil(m) * m);
    let n_pad = voxel_count(padded);
    let tiled = n_pad > cfg.max_inference_voxels;
    if tiled && !cfg.tiled_fallback {
        return Err(Error::Capacity(format!(
            "padded volume {padded:?} has {n_pad} voxels, above the limit of {}; enable the tiled fallback or raise the limit",
            cfg.max_inference_voxels
        )));
    }
    let mut edge = vec![0.0f32; n_pad];
    let bits = edges.bits();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                if bits[linear_index(dims, i, j, k)] {
                    edge[linear_index(padded, i, j, k)] = 1.0;
                }
            }
        }
    }
    let coords = coords_over(dims, [0; 3], padded);
    let mut field = ConditionedField::new(f, padded, edge, coords)?;
    if tiled {
        let size = (cfg.tile_size.div_ceil(m) * m).max(m);
        field = field.tiled(size, cfg.tile_overlap.min(size - 1))?;
    }
    let x = sample(&field, n_pad, cfg)?;
    let mut out = Vec::with_capacity(voxel_count(dims));
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                out.push(x[linear_index(padded, i, j, k)].clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Edge map of `x_src`, then a flow sample conditioned on it. Dims, spacing
/// and mask follow the input.
pub fn harmonize(
    f: &VelocityField,
    x_src: &Volume3D,
    canny: &CannyConfig,
    sampler: &SamplerConfig,
) -> Result<Volume3D> {
    let edges = adaptive_edge_detect(x_src, canny)?;
    harmonize_with_edges(f, x_src, &edges, sampler)
}

pub fn harmonize_with_edges(
    f: &VelocityField,
    x_src: &Volume3D,
    edges: &EdgeMap,
    sampler: &SamplerConfig,
) -> Result<Volume3D> {
    if edges.dims() != x_src.dims() {
        return Err(Error::Shape(format!(
            "edge map {:?} does not match volume {:?}",
            edges.dims(),
            x_src.dims()
        )));
    }
    let out = generate_from_edges(f, edges, sampler)?;
    x_src.with_data(out.into_iter().map(|v| v as f32).collect())
}
