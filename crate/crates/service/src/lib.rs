//! Streaming session server: clients open a session for a target pose,
//! stream keypoint frames and receive evaluation, classification and
//! feedback messages. Every session is logged for offline replay.

pub mod config;
pub mod connection;
pub mod protocol;
pub mod server;
pub mod session;

use asana_core::pipeline::PipelineError;
use asana_core::session_log::SessionLogError;
use thiserror::Error;

pub use config::ServerConfig;
pub use connection::Connection;
pub use protocol::{ClientMsg, ErrorMsg, PoseInfo, ServerMsg, Started};
pub use server::{router, serve_tcp, Server};
pub use session::SessionManager;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown pose {0}")]
    UnknownPose(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("no session is open on this connection")]
    NoSession,
    #[error("session {0} is already open on this connection")]
    SessionActive(String),
    #[error("server is at its limit of {0} concurrent sessions")]
    CapacityExceeded(usize),
    /// A frame record was rejected; the session continues.
    #[error("frame rejected: {0}")]
    Frame(PipelineError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Log(#[from] SessionLogError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Error code sent in `error` messages.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownPose(_) => "UnknownPose",
            ServiceError::UnknownSession(_) | ServiceError::NoSession => "UnknownSession",
            ServiceError::SessionActive(_) => "SessionActive",
            ServiceError::CapacityExceeded(_) => "CapacityExceeded",
            ServiceError::Frame(e) | ServiceError::Pipeline(e) => e.code(),
            ServiceError::Log(_) => "SessionLogError",
            ServiceError::Config(_) => "ConfigError",
            ServiceError::Io(_) => "IoError",
        }
    }
}
