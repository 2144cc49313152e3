//! Fixtures and oracles shared by the per-module suites and the acceptance run.
#![allow(dead_code)]

pub mod proxy;
pub mod rml;
pub mod sim;
pub mod swarm;
