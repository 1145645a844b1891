use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Independent consumers of the single top-level seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Split = 3,
    Synth = 4,
}

/// Deterministic generator for `stream` derived from `seed`.
pub fn fork(seed: u64, stream: Stream) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Generator for a sub-stream (e.g. one epoch) of a forked consumer.
pub fn fork_indexed(seed: u64, stream: Stream, index: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}
