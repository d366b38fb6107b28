//! Block-wise neural architecture search driven by tabular Q-learning.

pub mod agent;
pub mod app;
pub mod complexity;
pub mod evaluation;
pub mod graph;
pub mod nsc;
pub mod predictor;
pub mod protocol;
pub mod runtime;
pub mod search;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit mix used for hashing topologies and deriving streams.
pub(crate) fn mix64(h: u64, x: u64) -> u64 {
    splitmix(h ^ splitmix(x))
}
