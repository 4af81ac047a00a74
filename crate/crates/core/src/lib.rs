//! Router-visible / router-blind decomposition of Mixture-of-Experts hidden
//! states, and the analyses built on it: linear probes, magnitude
//! amplification, cross-layer continuity, expert paths and flow layout.
//!
//! `no_std` with `alloc`. File formats, parallelism and the CLI live in the
//! `routelens` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod amplify;
pub mod continuity;
pub mod decomp;
pub mod info;
pub mod kmeans;
pub mod layout;
pub mod matrix;
pub mod paths;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod types;

pub use decomp::{
    batch_decompose, decompose, router_basis, BatchChannels, Channel, ChannelPair, DecompError,
    RouterBasis, DEFAULT_SV_CUTOFF,
};
pub use matrix::{Matrix, ShapeError};
pub use rng::CounterRng;
pub use types::TokenMeta;
