//! The runnable medirelay service: HTTP API, durable command log,
//! sessions, the rural sync loop and the operator CLI.

pub mod cli;
pub mod config;
pub mod credential;
pub mod demo;
pub mod error;
pub mod eventlog;
pub mod http;
pub mod link;
pub mod node;
pub mod server;

pub use config::{ServiceConfig, SiteRole};
pub use error::ServiceError;
pub use node::{Clock, Node, Session};
