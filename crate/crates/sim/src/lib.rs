// Licensed under the Apache-2.0 license

//! Deterministic network simulation of the trusted set-top box protocols.

pub mod actors;
pub mod adversary;
pub mod bundled;
pub mod network;
pub mod runner;
pub mod scenario;
pub mod verify;

pub use adversary::Adversary;
pub use runner::{run_scenario, Outcome, Report, Simulation};
pub use scenario::{ConfigError, Scenario};
