//! Deterministic per-path noise: every simulated path owns its own ChaCha
//! stream keyed by (seed, path index), so ensembles are reproducible under any
//! scheduling and a prefix of paths is unaffected by the ensemble size.

use rand_core::{RngCore, SeedableRng};

use crate::scalar::{lit, Real};

pub(crate) struct PathNormals {
    rng: rand_chacha::ChaCha8Rng,
}

impl PathNormals {
    pub fn new(seed: u64, path: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // stream 0 is left unused so that path 0 differs from the root stream
        rng.set_stream(path + 1);
        PathNormals { rng }
    }

    /// uniform in the open interval (0, 1)
    fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// standard normal via Box-Muller; generated in f64 and narrowed afterwards
    /// so f32 runs see the same draw sequence
    pub fn next_normal<T: Real>(&mut self) -> T {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        lit(z)
    }
}
