//! Command line, job runner and HTTP API around `ipdm-core`.

pub mod api;
pub mod cli;
pub mod jobs;
pub mod ops;
mod plot;
