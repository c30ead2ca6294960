//! Named RNG substreams. Every random draw in the pipeline comes from a
//! ChaCha8 stream keyed by the run seed and a stage name, so stages can be
//! rerun or reordered without perturbing each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
