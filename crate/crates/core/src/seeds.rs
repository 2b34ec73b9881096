//! Seed derivation.
//!
//! Every random stream in an experiment is derived from one master seed as
//! `derive(master, stream, a, b)`: the four words are folded through the
//! SplitMix64 finalizer one after another, starting from `master`. Streams
//! are identified by the constants below, `a`/`b` carry indices such as the
//! client id and the round the client's model was issued in.

pub const PARTITION: u64 = 1;
pub const INIT: u64 = 2;
pub const DELAY: u64 = 3;
pub const ATTACKER: u64 = 4;
pub const TRAINING: u64 = 5;
pub const DATA: u64 = 6;
pub const HOLDOUT: u64 = 7;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64, a: u64, b: u64) -> u64 {
    [stream, a, b]
        .into_iter()
        .fold(splitmix64(master), |acc, w| splitmix64(acc ^ w))
}
