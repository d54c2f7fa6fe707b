//! Configuration, HTTP service and command-line plumbing around
//! `statrag-core`.

pub mod config;
pub mod server;

pub use config::{ConfigError, Engine, EngineError, ServiceConfig};
pub use server::{router, serve, AppState};
