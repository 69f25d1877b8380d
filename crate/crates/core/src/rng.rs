//! Deterministic derivation of independent random streams from a master seed.
//!
//! Every random draw in the solver comes from a stream keyed by
//! `(master seed, purpose, i, j)`, e.g. `(seed, Collisions, step, cell)`.
//! Streams never depend on the worker that consumes them, so results are
//! reproducible for any thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Collisions = 2,
    Thermostat = 3,
    Sampling = 4,
    Replica = 5,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the key into a 64-bit value; used for replica seeds.
pub fn derive_seed(master: u64, purpose: Purpose, i: u64, j: u64) -> u64 {
    let mut s = master;
    let mut acc = splitmix64(&mut s);
    for word in [purpose as u64, i, j] {
        s ^= word.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        acc ^= splitmix64(&mut s).rotate_left(17);
    }
    acc
}

pub fn stream(master: u64, purpose: Purpose, i: u64, j: u64) -> ChaCha8Rng {
    let mut s = derive_seed(master, purpose, i, j);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
