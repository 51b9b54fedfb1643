//! Empowerment-based assistance on small two-agent MDPs.

pub mod agent;
pub mod baselines;
pub mod buffer;
pub mod contrastive;
pub mod error;
pub mod features;
pub mod fidelity;
pub mod grid;
pub mod harness;
pub mod human;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod service;

pub use error::{Error, Result};
