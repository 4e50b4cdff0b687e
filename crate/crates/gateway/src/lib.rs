//! The interleaving gateway: configuration, system adapters, the
//! transport-independent request engine, the feedback store, and the HTTP
//! service in front of them.

pub mod config;
pub mod engine;
pub mod feedback;
pub mod http;
pub mod participant;
pub mod systems;

pub use config::{GatewayConfig, RppLimits};
pub use engine::{build_adapters, FeedbackPayload, Gateway, GatewayError, GatewayParts, PageResponse};
pub use feedback::{DirectorySink, FeedbackSink, FeedbackStore, HttpSink};
pub use systems::{Adapter, SystemAdapter, SystemRequest, SystemResponse};
