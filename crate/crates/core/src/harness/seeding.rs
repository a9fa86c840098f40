//! Named sub-streams derived from one 64-bit master seed.
//!
//! `derive_seed(master, label) = splitmix64(master ^ fnv1a64(label))`. Each
//! component (environment generation, trajectory sampling, observation
//! noise, agent internals) draws from its own `ChaCha8Rng` seeded this way,
//! so changing how much randomness one component consumes never shifts
//! another's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ENV_STREAM: &str = "env";
pub const SAMPLER_STREAM: &str = "sampler";
pub const NOISE_STREAM: &str = "noise";
pub const AGENT_STREAM: &str = "agent";

fn fnv1a64(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a64(label))
}

pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}
