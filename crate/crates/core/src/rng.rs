//! Counter-keyed random streams.
//!
//! Every random draw in the crate comes from a stream addressed by a root
//! seed plus a tuple of labels (purpose, epoch, batch, sample, direction...).
//! The same key always yields the same stream, regardless of which thread
//! asks for it or in which order, which is what makes parallel evaluation
//! reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose labels used as the first key component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Direction = 1,
    Shuffle = 2,
    AdaptorInit = 3,
    LabelNoise = 4,
    Corruption = 5,
    Dataset = 6,
    Training = 7,
    Trial = 8,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns the stream for `(seed, purpose, key...)`.
pub fn stream(seed: u64, purpose: Purpose, key: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &k in std::iter::once(&(purpose as u64)).chain(key) {
        state ^= k.wrapping_mul(0xD6E8_FEB8_6659_FD93).rotate_left(17) ^ acc;
        acc = splitmix64(&mut state);
    }
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Derives a child seed, for handing a sub-component its own root.
pub fn derive_seed(seed: u64, purpose: Purpose, key: &[u64]) -> u64 {
    use rand::RngCore;
    stream(seed, purpose, key).next_u64()
}
