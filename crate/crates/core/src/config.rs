//! The run configuration: one JSON document with a section per module.
//! Every field is optional and falls back to its default; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::edges::CannyConfig;
use crate::error::{Error, Result};
use crate::field::FieldArch;
use crate::flow::{FlowTrainConfig, SamplerConfig};
use crate::metrics::MetricsConfig;
use crate::patches::PatchSamplerConfig;
use crate::phantom::{ContrastFunction, PhantomSpec};
use crate::refine::RefineConfig;
use crate::volume::{normalize_percentile, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    Always,
    Never,
    /// Only when some intensity falls outside `[0, 1]`.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeConfig {
    pub normalize: NormalizeMode,
    pub low_percentile: f64,
    pub high_percentile: f64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            normalize: NormalizeMode::Auto,
            low_percentile: 1.0,
            high_percentile: 99.0,
        }
    }
}

impl VolumeConfig {
    pub fn prepare(&self, v: Volume3D) -> Result<Volume3D> {
        let outside = v.data().iter().any(|&x| !(0.0..=1.0).contains(&x));
        let run = match self.normalize {
            NormalizeMode::Always => true,
            NormalizeMode::Never => false,
            NormalizeMode::Auto => outside,
        };
        if run {
            Ok(normalize_percentile(&v, self.low_percentile, self.high_percentile)?.0)
        } else {
            Ok(v)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub train: FlowTrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            train: FlowTrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub spec: PhantomSpec,
    pub n_subjects: usize,
    pub target: ContrastFunction,
    pub sources: Vec<ContrastFunction>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            spec: PhantomSpec::default(),
            n_subjects: 10,
            target: ContrastFunction::target_preset(),
            sources: vec![
                ContrastFunction::source_compressed(),
                ContrastFunction::source_expanded(),
            ],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every per-module seed with one derived from it.
    pub seed: Option<u64>,
    pub volume: VolumeConfig,
    pub edges: CannyConfig,
    pub patches: PatchSamplerConfig,
    pub field: FieldArch,
    pub flow: FlowConfig,
    pub refine: RefineConfig,
    pub baselines: BaselineConfig,
    pub metrics: MetricsConfig,
    pub phantom: PhantomConfig,
}

/// Distinct stream seeds from one master seed (SplitMix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const SEED_PHANTOM: u64 = 0;
pub const SEED_PATCHES: u64 = 1;
pub const SEED_TRAIN: u64 = 2;
pub const SEED_SAMPLER: u64 = 3;

impl RunConfig {
    /// Settings sized for 32³ phantoms on a CPU: coarse anatomy, 16³ patches,
    /// width-8 field at a higher learning rate, 3% non-maximum slack.
    pub fn desk32() -> Self {
        let mut c = Self::default();
        c.phantom.spec = PhantomSpec::desk32();
        c.phantom.n_subjects = 12;
        c.edges.nms_tolerance = 0.03;
        c.patches.patch_size = 16;
        c.field.base_width = 8;
        c.flow.train.learning_rate = 2e-3;
        c.flow.train.batch_size = 4;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidParam(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the master seed, if any, to every module seed.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed {
            self.phantom.spec.rng_seed = derive_seed(s, SEED_PHANTOM);
            self.patches.rng_seed = derive_seed(s, SEED_PATCHES);
            self.flow.train.rng_seed = derive_seed(s, SEED_TRAIN);
            self.flow.sampler.rng_seed = derive_seed(s, SEED_SAMPLER);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.edges.validate()?;
        self.patches.validate()?;
        self.field.validate()?;
        self.flow.train.validate()?;
        self.flow.sampler.validate()?;
        self.refine.validate()?;
        self.phantom.spec.validate()?;
        for c in std::iter::once(&self.phantom.target).chain(&self.phantom.sources) {
            c.validate()?;
        }
        if self.baselines.histogram_bins < 2 {
            return Err(Error::InvalidParam("baselines.histogram_bins must be >= 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
        RunConfig::desk32().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"flow": {"train": {"lr": 1}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"refine": {"iterations": 0}, "field": {"base_width": 4}}"#).unwrap();
        assert_eq!(c.refine.iterations, 0);
        assert_eq!(c.refine.step_size, 0.02);
        assert_eq!(c.field.base_width, 4);
        assert_eq!(c.field.level_multipliers, vec![1, 2]);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig {
            seed: Some(7),
            ..Default::default()
        }
        .resolved();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.clone().resolved(), c);
    }

    #[test]
    fn master_seed_fans_out() {
        let c = RunConfig {
            seed: Some(7),
            ..Default::default()
        }
        .resolved();
        let seeds = [
            c.phantom.spec.rng_seed,
            c.patches.rng_seed,
            c.flow.train.rng_seed,
            c.flow.sampler.rng_seed,
        ];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(RunConfig::default().resolved(), RunConfig::default());
    }

    #[test]
    fn auto_normalization_only_touches_out_of_range_volumes() {
        let cfg = VolumeConfig::default();
        let inside = Volume3D::from_fn([4, 4, 4], |i, _, _| i as f32 / 3.0).unwrap();
        assert_eq!(cfg.prepare(inside.clone()).unwrap(), inside);
        let outside = inside.map(|x| 100.0 * x).unwrap();
        let out = cfg.prepare(outside).unwrap();
        assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
