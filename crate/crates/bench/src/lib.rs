//! Fixtures shared by the benchmarks.

use edgeflow::phantom::{generate_subject, ContrastFunction, PhantomSpec};
use edgeflow::{Dims, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Target-contrast phantom at the desk scale.
pub fn phantom32() -> Volume3D {
    generate_subject(&PhantomSpec::desk32(), 1, &ContrastFunction::target_preset(), &[])
        .expect("phantom")
        .target
}

pub fn uniform(dims: Dims, seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume3D::from_fn(dims, |_, _, _| rng.random_range(0.0f32..1.0)).expect("volume")
}
