//! Seed derivation. Every random stream in the crate comes from a ChaCha8
//! generator keyed by a 64-bit seed mixed with a purpose tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a parent seed, a tag and an index.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(seed);
    for b in tag.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ mix(index))
}

pub fn stream(seed: u64, tag: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Serializes a generator's position as 14 little-endian words:
/// 8 seed words, 2 stream words, 4 word-position words.
pub fn save_state(rng: &StreamRng) -> Vec<u32> {
    let mut words = Vec::with_capacity(14);
    for chunk in rng.get_seed().chunks(4) {
        words.push(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let stream = rng.get_stream();
    words.push(stream as u32);
    words.push((stream >> 32) as u32);
    let pos = rng.get_word_pos();
    for i in 0..4 {
        words.push((pos >> (32 * i)) as u32);
    }
    words
}

pub fn load_state(words: &[u32]) -> Option<StreamRng> {
    if words.len() != 14 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, w) in words[..8].iter().enumerate() {
        seed[i * 4..i * 4 + 4].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[8] as u64 | (words[9] as u64) << 32);
    let pos = (0..4).fold(0u128, |acc, i| acc | (words[10 + i] as u128) << (32 * i));
    rng.set_word_pos(pos);
    Some(rng)
}
