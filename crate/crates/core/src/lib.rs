//! Private teacher-ensemble knowledge transfer with noise-robust students.
//!
//! The crate covers the full pipeline: disjoint teacher shards, Gaussian
//! NoisyMax private label aggregation with a Renyi-DP ledger, and a
//! semi-supervised GAN student with two peer discriminators trained robustly
//! against the noisy labels the aggregation produces, plus the weighted-decay
//! cleansing pass that moves suspected-noisy labels back to the unlabeled
//! pool.

pub mod accountant;
pub mod aggregate;
pub mod data;
pub mod error;
pub mod experiment;
pub mod net;
pub mod rng;
pub mod robust;
pub mod student;

pub use error::{Error, Result};
pub use rng::Rng;
