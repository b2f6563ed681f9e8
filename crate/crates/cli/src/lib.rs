//! Command-line plumbing and the local curation HTTP service.

pub mod cli;
pub mod serve;
