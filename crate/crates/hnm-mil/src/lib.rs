//! Hard-negative-mining self-training for multiple instance learning.
//!
//! A desk-scale pipeline: a dual-stream MIL aggregator with a multiple
//! instance ranking loss scores instances within labeled bags, pseudo-labels
//! drive construction of positive and hard-negative instance banks, and a
//! supervised contrastive loss fine-tunes the instance encoder on those
//! banks. The loop repeats until the iteration budget is spent; every run is
//! a deterministic function of its seed.

pub mod error;
pub mod numerics;
pub mod optim;
pub mod seeds;

pub mod data;
pub mod encoder;
pub mod aggregator;
pub mod contrastive;
pub mod eval;

pub mod checkpoint;
pub mod config;
pub mod selftrain;

pub use error::{Error, Result};
