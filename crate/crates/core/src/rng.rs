//! Labeled random substreams derived from a single 64-bit master seed.
//!
//! A stream is addressed by a path of labels, e.g. `["trial", 3, "sample", 17]`.
//! The path is folded into a 256-bit ChaCha key: each element is absorbed into
//! a running 64-bit state with a SplitMix64 finalizer, and the final state is
//! expanded into four key words by further SplitMix64 steps. String labels are
//! hashed with FNV-1a before absorption, integer labels are absorbed directly
//! (with a distinct domain tag so `"3"` and `3` never collide).
//!
//! Distinct paths give unrelated keys, so streams can be handed to independent
//! trials and replayed regardless of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

const TAG_STR: u64 = 0x5354_525f_4c41_4245; // "STR_LABE"
const TAG_INT: u64 = 0x494e_545f_4c41_4245; // "INT_LABE"

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A position in the substream tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedPath {
    state: u64,
}

impl SeedPath {
    pub fn new(master_seed: u64) -> Self {
        Self {
            state: splitmix64(master_seed),
        }
    }

    /// Descends into a named child.
    pub fn label(self, name: &str) -> Self {
        self.absorb(TAG_STR, fnv1a(name.as_bytes()))
    }

    /// Descends into an indexed child.
    pub fn index(self, i: u64) -> Self {
        self.absorb(TAG_INT, i)
    }

    fn absorb(self, tag: u64, value: u64) -> Self {
        let s = splitmix64(self.state ^ tag);
        Self {
            state: splitmix64(s ^ value.rotate_left(17)),
        }
    }

    /// Materializes the generator for this path.
    pub fn rng(self) -> SimRng {
        let mut key = [0u8; 32];
        let mut s = self.state;
        for chunk in key.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// A 64-bit value derived from the path, for seeding nested components.
    pub fn seed(self) -> u64 {
        splitmix64(self.state)
    }
}

/// Shorthand for `SeedPath::new(seed).label(..).index(..)...`.
///
/// Each label is either a string or an integer.
pub fn rng_substream(master_seed: u64, labels: &[Label<'_>]) -> SimRng {
    labels
        .iter()
        .fold(SeedPath::new(master_seed), |p, l| match *l {
            Label::Name(s) => p.label(s),
            Label::Index(i) => p.index(i),
        })
        .rng()
}

#[derive(Debug, Clone, Copy)]
pub enum Label<'a> {
    Name(&'a str),
    Index(u64),
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Name(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(i: u64) -> Self {
        Label::Index(i)
    }
}
