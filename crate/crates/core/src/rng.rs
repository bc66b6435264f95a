//! Seed derivation. Every random draw in the crate comes from a `ChaCha8Rng`
//! seeded through [`derive_seed`], so results depend only on the master seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::real::Real;

pub type GridRng = ChaCha8Rng;

/// One round of splitmix64.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of the named stream: `splitmix64(splitmix64(master ^ tag) + index)`,
/// where `tag` is the FNV-1a hash of the stream name.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut tag: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        tag ^= b as u64;
        tag = tag.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(master ^ tag).wrapping_add(index))
}

pub fn rng_for(master: u64, stream: &str, index: u64) -> GridRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

pub fn normal<T: Real>(rng: &mut impl Rng) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::c(z)
}

pub fn fill_normal<T: Real>(rng: &mut impl Rng, out: &mut [T]) {
    for x in out {
        *x = normal(rng);
    }
}

pub fn normal_vec<T: Real>(rng: &mut impl Rng, n: usize) -> Vec<T> {
    let mut v = vec![T::zero(); n];
    fill_normal(rng, &mut v);
    v
}
