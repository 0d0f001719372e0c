//! Federated learning under non-ignorable client missingness.
//!
//! Clients opt out of training or straggle, and whether they do can depend on
//! their private data. This crate simulates such a population, estimates
//! each responsive client's response propensity from shadow-variable moment
//! equations, and samples clients with inverse-propensity weights so that
//! federated SGD targets the full-population risk. The [`mdag`] module holds
//! the graphical machinery used to reason about which missingness
//! mechanisms are in play.

pub mod experiment;
pub mod mdag;
pub mod model;
pub mod orchestrator;
pub mod propensity;
pub mod rng;
pub mod synth;
