//! Per-path random streams.
//!
//! Every path owns a ChaCha8 stream keyed by the master seed with the path
//! index as stream id, so draws never depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Counter-based generator for path `path` under `seed`.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Derive an independent master seed for a labelled sub-experiment.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fill `out` with Brownian increments of variance `dt`.
pub fn fill_increments(rng: &mut ChaCha8Rng, dt: f64, out: &mut [f64]) {
    let sd = dt.sqrt();
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = sd * z;
    }
}
