// SPDX-License-Identifier: Apache-2.0

//! Named, independent random streams derived from one master seed.
//!
//! Every consumer (data order, reparameterisation noise, Gumbel noise,
//! diagnostics, ...) draws from its own stream keyed by name and an index
//! (usually the global epoch), so enabling or disabling one consumer never
//! shifts the draws seen by another, and a run resumed at epoch `e`
//! reproduces the same draws without saved generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const DATA_ORDER: &str = "data-order";
pub const REPARAM: &str = "reparam-eps";
pub const GUMBEL: &str = "gumbel";
pub const DIAGNOSTICS: &str = "diagnostics";
pub const INIT: &str = "init";
pub const DATASET: &str = "dataset";
pub const FVM: &str = "fvm";

pub fn stream(master: u64, name: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, GUMBEL, 3).random();
        let b: u64 = stream(7, GUMBEL, 3).random();
        let c: u64 = stream(7, REPARAM, 3).random();
        let d: u64 = stream(7, GUMBEL, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
