//! Zeroth-order test-time data adaptation for query-only classifiers.
//!
//! A small "data adaptor" network is trained in front of a frozen model that
//! only answers probability queries. Gradients for the adaptor come from
//! randomized finite differences, and training targets come from the
//! model's own pseudo-labels split into a reliable and an unreliable set.

pub mod adaptor;
pub mod bench;
pub mod blackbox;
pub mod config;
pub mod engine;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod runner;
pub mod select;
pub mod selftest;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
