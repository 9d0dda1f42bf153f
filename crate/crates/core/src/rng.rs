//! Named deterministic random streams.
//!
//! All randomness in the simulator flows from a single root seed. Each use
//! site asks for a stream addressed by a short tag plus integer coordinates
//! (client id, round, epoch, ...). Streams are independent of the order in
//! which other streams are consumed, which is what makes resumed runs and
//! worker-parallel runs reproduce serial runs exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte string; used only to fold the tag into the key.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the ChaCha stream identified by `(root, tag, coords)`.
pub fn stream(root: u64, tag: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut acc = root ^ fnv1a(tag.as_bytes());
    for &c in coords {
        // Feed each coordinate through the mixer so (1, 2) and (2, 1) differ.
        acc = splitmix64(&mut acc) ^ c.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
    let mut s = acc;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
