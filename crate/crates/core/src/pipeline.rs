//! End-to-end composition of the modules under one [`RunConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, RunConfig};
use crate::edges::{adaptive_edge_detect, EdgeMap};
use crate::error::Result;
use crate::field::VelocityField;
use crate::flow::{harmonize_with_edges, train, LossTrace};
use crate::phantom::{generate_corpus, Corpus};
use crate::refine::{refine, Refined};
use crate::volume::Volume3D;

const SEED_INIT: u64 = 16;

pub fn phantom_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let p = &cfg.phantom;
    let mut rng = ChaCha8Rng::seed_from_u64(p.spec.rng_seed);
    generate_corpus(&p.spec, p.n_subjects, &p.target, &p.sources, &mut rng)
}

/// Fresh field; the initialization stream is derived from the training seed.
pub fn init_field(cfg: &RunConfig) -> Result<VelocityField> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.flow.train.rng_seed, SEED_INIT));
    VelocityField::init(cfg.field.clone(), &mut rng)
}

pub fn detect_all(volumes: &[Volume3D], cfg: &RunConfig) -> Result<Vec<EdgeMap>> {
    volumes.iter().map(|v| adaptive_edge_detect(v, &cfg.edges)).collect()
}

/// Trains a fresh field on target-domain volumes.
pub fn train_target(
    volumes: &[Volume3D],
    cfg: &RunConfig,
    observer: impl FnMut(usize, f64, &VelocityField) -> Result<()>,
) -> Result<(VelocityField, LossTrace)> {
    let edges = detect_all(volumes, cfg)?;
    train(init_field(cfg)?, volumes, &edges, &cfg.flow.train, &cfg.patches, observer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Harmonized {
    pub edges: EdgeMap,
    pub flow: Volume3D,
    pub refined: Refined,
}

/// Edge detection, flow sampling and refinement of one source volume.
pub fn harmonize_volume(f: &VelocityField, src: &Volume3D, cfg: &RunConfig) -> Result<Harmonized> {
    let edges = adaptive_edge_detect(src, &cfg.edges)?;
    let flow = harmonize_with_edges(f, src, &edges, &cfg.flow.sampler)?;
    let refined = refine(&flow, src, &cfg.refine)?;
    Ok(Harmonized { edges, flow, refined })
}
