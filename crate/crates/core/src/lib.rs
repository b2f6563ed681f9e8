//! Perception-tree construction, complex-reasoning and reflection dataset
//! compilation for radiology report generation, and report-generation
//! metrics.

pub mod agent;
pub mod config;
pub mod corpus;
pub mod curation;
mod error;
pub mod export;
pub mod import;
pub mod io;
pub mod kg;
pub mod metrics;
pub mod pipeline;
pub mod reasoning;
pub mod reflection;
mod seed;
pub mod tree;

pub use error::{Error, Result, TransportError};

pub type NlgScores = metrics::NlgScoreSet<f64>;
pub type CeScores = metrics::CeScoreSet<f64>;
pub type RougeScores = metrics::RougeL<f64>;
