//! Configuration and command implementations behind the `tdamp` binary.

pub mod config;
pub mod run;
