//! Deterministic derivation of per-component random streams.
//!
//! Every source of randomness in the pipeline is a ChaCha8 stream seeded from
//! `derive_seed(master, component, index)`. The derivation is a fixed
//! FNV-1a/SplitMix64 chain, so a run is fully replayable from its single
//! top-level seed regardless of scheduling: parallel workers never share a
//! stream, they each derive their own from (component name, worker index).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derive a child seed from a master seed, a component label, and an index.
pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    let mut s = splitmix64(master);
    s ^= fnv1a(component.as_bytes());
    s = splitmix64(s);
    s ^= index;
    splitmix64(s)
}

/// The RNG used everywhere in this crate.
pub type Stream = ChaCha8Rng;

/// Open a seeded stream for `(master, component, index)`.
pub fn stream(master: u64, component: &str, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, component, index))
}
