//! Deterministic simulator for blockchain-backed federated learning.
//!
//! Edge devices register and receive tokens, pass a resource gate, train a
//! shared regression model locally, and submit updates. Updates are screened
//! by a 2-means outlier filter and scored by a rotating committee of
//! high-reputation devices. Accepted updates are averaged with FedAvg and the
//! round is sealed into each contributor's local blockchain under PoW or PoET.
//!
//! | module         | what it covers                                           |
//! |----------------|----------------------------------------------------------|
//! | [`registry`]   | tokens, resource profiles, eligibility, probes, rosters  |
//! | [`fl`]         | datasets, local training, FedAvg, poisoning              |
//! | [`privacy`]    | Gaussian obfuscation and the (ε, δ) bound                |
//! | [`defense`]    | pairwise distances, 2-means, outlier-cluster selection   |
//! | [`reputation`] | trust ledger, committee selection, CC-scores             |
//! | [`chain`]      | blocks, hashing, PoW/PoET, validation, export/restore    |
//! | [`sim`]        | the round loop, configuration and metrics output         |
//!
//! Runnable walkthroughs live in `crates/core/examples/`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod defense;
pub mod error;
pub mod fl;
pub mod privacy;
pub mod registry;
pub mod reputation;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
