//! Stable seed derivation.
//!
//! Every random draw in the engine comes from a `ChaCha8Rng` seeded by
//! [`derive`], which folds a parent seed with a list of tags. The mixing is
//! fixed here (not `std::hash`) so seeds stay identical across toolchains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A tag folded into a derived seed.
#[derive(Debug, Clone, Copy)]
pub enum Tag<'a> {
    Int(u64),
    Str(&'a str),
}

impl From<u64> for Tag<'_> {
    fn from(v: u64) -> Self {
        Tag::Int(v)
    }
}

impl From<u32> for Tag<'_> {
    fn from(v: u32) -> Self {
        Tag::Int(u64::from(v))
    }
}

impl From<usize> for Tag<'_> {
    fn from(v: usize) -> Self {
        Tag::Int(v as u64)
    }
}

impl<'a> From<&'a str> for Tag<'a> {
    fn from(v: &'a str) -> Self {
        Tag::Str(v)
    }
}

/// Derives a child seed from `parent` and an ordered list of tags.
pub fn derive(parent: u64, tags: &[Tag<'_>]) -> u64 {
    let mut h = splitmix(parent);
    for tag in tags {
        match *tag {
            Tag::Int(v) => {
                h = splitmix(h ^ splitmix(v ^ 0x1));
            }
            Tag::Str(s) => {
                // FNV-1a over the bytes, then mixed in.
                let mut f: u64 = 0xcbf2_9ce4_8422_2325;
                for b in s.bytes() {
                    f ^= u64::from(b);
                    f = f.wrapping_mul(0x0000_0100_0000_01B3);
                }
                h = splitmix(h ^ splitmix(f ^ 0x2));
            }
        }
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
