use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams derived from a single run seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Subsample = 2,
    Init = 3,
    Shuffle = 4,
    Synth = 5,
}

/// Independent generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
