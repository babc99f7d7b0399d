//! Experiment runner for the LDG backward-SPDE solver: configuration, run
//! reports, sweeps, solution profiles, and a built-in selftest.

pub mod config;
pub mod profile;
pub mod report;
pub mod runner;
pub mod selftest;
pub mod sweep;
