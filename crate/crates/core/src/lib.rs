//! Blind harmonization of 3D volumes with an edge-conditioned rectified flow.
//!
//! A velocity field is trained on target-domain volumes only, to rebuild an
//! image from its Canny edge map plus normalized coordinates. At inference a
//! source-domain volume is reduced to its edges, regenerated by integrating
//! the flow ODE, and then nudged back toward the source by gradient ascent on
//! normalized cross-correlation.

pub mod baselines;
pub mod config;
pub mod edges;
pub mod error;
pub mod field;
pub mod filter;
pub mod flow;
pub mod metrics;
pub mod patches;
pub mod phantom;
pub mod pipeline;
pub mod refine;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, NormalizationRecord, Volume3D, VolumeFormat};
