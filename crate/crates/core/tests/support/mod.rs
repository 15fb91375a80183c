//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod gradients;
pub mod loss_oracles;
pub mod metrics;
