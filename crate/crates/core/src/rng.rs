use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams, named by purpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Order = 2,
    Augment = 3,
    Dropout = 4,
    Mask = 5,
    Caption = 6,
    Probe = 7,
    Synth = 8,
}

/// A generator keyed by `(seed, stream, a, b)`; distinct keys give unrelated streams.
pub fn derive(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
