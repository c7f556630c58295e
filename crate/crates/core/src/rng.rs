//! Seeded random streams.
//!
//! Every random consumer gets its own ChaCha stream: the 64-bit seed picks
//! the key and a purpose-specific counter picks the stream, so adding or
//! removing one consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream `stream` under key `seed`.
pub fn substream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable 32-bit key for a name (FNV-1a), for keying streams by label.
pub fn name_key(name: &str) -> u64 {
    let mut h: u32 = 0x811c_9dc5;
    for b in name.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h as u64
}

/// Purposes that get dedicated streams within one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainData {
        component: u64,
    },
    Init {
        component: u64,
        parameterisation: u64,
    },
    Train {
        component: u64,
        parameterisation: u64,
    },
    Sample {
        entry: u64,
    },
    Mcmc {
        entry: u64,
    },
    Reference,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::TrainData { component } => 0x100 + component,
            Stream::Init {
                component,
                parameterisation,
            } => 0x200 + 16 * parameterisation + component,
            Stream::Train {
                component,
                parameterisation,
            } => 0x300 + 16 * parameterisation + component,
            Stream::Sample { entry } => (1 << 32) | (entry & 0xffff_ffff),
            Stream::Mcmc { entry } => (2 << 32) | (entry & 0xffff_ffff),
            Stream::Reference => 3 << 32,
        }
    }

    pub fn rng(self, seed: u64) -> SimRng {
        substream(seed, self.id())
    }
}
