//! Seed derivation for reproducible random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha stream keyed by
//! `(root seed, stream name, counter)`. Streams are independent of each other
//! and of evaluation order, so any draw can be regenerated from its counter
//! without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random substreams used across the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Noise,
    Batch,
    MonteCarlo,
    Labels,
    PValue,
    Synthetic,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x696e_6974,
            Stream::Shuffle => 0x7368_7566,
            Stream::Noise => 0x6e6f_6973,
            Stream::Batch => 0x6261_7463,
            Stream::MonteCarlo => 0x6d63_6d63,
            Stream::Labels => 0x6c61_6265,
            Stream::PValue => 0x7076_616c,
            Stream::Synthetic => 0x7379_6e74,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for draw `counter` of `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ splitmix64(stream.tag()));
    let words = [
        state,
        splitmix64(state ^ counter),
        splitmix64(counter.wrapping_add(0x5851_f42d_4c95_7f2d)),
        splitmix64(stream.tag() ^ seed.rotate_left(17)),
    ];
    for (chunk, word) in key.chunks_exact_mut(8).zip(words) {
        state = splitmix64(state ^ word);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
