//! Deterministic simulator of synchronous federated learning over
//! heterogeneous clients, with a double-deep-Q client-selection agent and
//! baseline selection policies.

pub mod agent;
pub mod config;
pub mod data;
pub mod error;
pub mod hardware;
pub mod numerics;
pub mod output;
pub mod scoring;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};
