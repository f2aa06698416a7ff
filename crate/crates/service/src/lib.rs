//! WebSocket bridge that runs a live reaching session against the
//! [`reachmap`] engine.

pub mod config;
pub mod protocol;
pub mod server;

pub use config::ServiceConfig;
pub use server::{serve, spawn, ServiceHandle};
