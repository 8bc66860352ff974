//! Duplication audits for image-text datasets and multi-seed replication
//! probes for text-to-image models.

pub mod backend;
pub mod cache;
pub mod cluster;
pub mod embed;
pub mod error;
pub mod ingest;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod text;

pub use error::{Error, Result};
