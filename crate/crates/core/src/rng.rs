//! Named random sub-streams derived from a single run seed.
//!
//! Each consumer (data synthesis, weight init, dropout, pair sampling, ...)
//! draws from its own ChaCha stream keyed by `(seed, stream, index)`, so one
//! component can change how much randomness it uses without shifting any other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Split,
    Init,
    Dropout,
    Sampler,
    Pretrain,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Split => 0x7370_6c74,
            Stream::Init => 0x696e_6974,
            Stream::Dropout => 0x6472_6f70,
            Stream::Sampler => 0x7361_6d70,
            Stream::Pretrain => 0x7072_6574,
            Stream::Eval => 0x6576_616c,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(seed ^ stream.tag().rotate_left(32)) ^ index)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
