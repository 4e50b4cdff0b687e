//! Core of a living-lab evaluation platform for academic search: the shared
//! domain model, on-disk formats, Team-Draft interleaving, plain baseline
//! retrieval, the feedback log, and the click metrics computed from it.

pub mod baseline;
pub mod ingest;
pub mod interleave;
pub mod metrics;
pub mod model;
pub mod report;
pub mod stats;
pub mod store;

pub use model::*;
