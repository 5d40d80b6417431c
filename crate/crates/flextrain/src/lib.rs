//! FlexTrain: a depth-flexible training engine and federated-learning
//! simulator.
//!
//! One residual network is trained under a distribution π over prefix depths:
//! each step samples a depth `k ~ π`, runs the first `k` blocks (deeper
//! blocks act as identity), and updates only that prefix. Auto-distillation
//! penalties pull shallow-prefix features toward detached deeper features so
//! every deployable prefix stays accurate. The federated runner simulates
//! heterogeneous devices that each train the deepest prefix they can hold,
//! with per-layer or padded averaging on the server, plus the FedSmall and
//! FedClass baselines.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod report;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};

/// Stream ids for [`derive_seed`], so independent consumers of one master
/// seed never share a stream.
pub mod streams {
    pub const NET_INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const DATA_TRAIN: u64 = 3;
    pub const DATA_TEST: u64 = 4;
    pub const PARTITION: u64 = 5;
    pub const FED_SERVER: u64 = 6;
    pub const DEVICE_BASE: u64 = 1000;
}

/// Deterministic seed derivation (SplitMix64 over master and stream id).
/// Stable across platforms and releases.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
