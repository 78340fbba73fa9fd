//! Sub-seed derivation.
//!
//! Every random stream in a run is keyed by `(master_seed, tag, index)` and
//! mixed with the SplitMix64 finalizer, so results do not depend on thread
//! scheduling or on which other streams were consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Component tags. Each stream of randomness uses its own tag so that, for
/// example, mask draws never perturb trained parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Tag {
    Init = 1,
    Batch = 2,
    Hyper = 3,
    Alg = 4,
    Swag = 5,
    Mask = 6,
    Data = 7,
    Split = 8,
    Cell = 9,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `child = mix(mix(mix(master) ^ tag) ^ index)`.
pub fn derive_seed(master: u64, tag: Tag, index: u64) -> u64 {
    let a = splitmix64(master);
    let b = splitmix64(a ^ (tag as u64).wrapping_mul(GOLDEN));
    splitmix64(b ^ index)
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
