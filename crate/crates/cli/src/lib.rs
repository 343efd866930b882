//! File formats, configuration loading, run orchestration and the command
//! line front end for `module-core`.

pub mod cli;
pub mod config;
pub mod formats;
pub mod run;
