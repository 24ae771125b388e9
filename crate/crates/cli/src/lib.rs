//! Library half of the `softpref` binary: experiment registry, config
//! plumbing, and result emission, exposed so integration tests can drive
//! the exact defaults the binary runs.

pub mod config;
pub mod experiments;
pub mod report;
