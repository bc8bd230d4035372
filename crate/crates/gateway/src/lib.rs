//! Service surface for wayfinder sessions: HTTP API with a resumable event
//! stream, append-only session logs, layered configuration, a remote
//! planner client and the headless replay command.

pub mod catalog;
pub mod cli;
pub mod config;
pub mod http;
pub mod remote;
pub mod service;
pub mod store;

pub use config::{BackendKind, Config, ConfigLayer};
pub use service::{ApiError, Gateway};
