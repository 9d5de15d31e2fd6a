use std::fmt;

use crate::cluster::{GPid, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A single problem found while validating a scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("node {0} does not exist")]
    BadNode(NodeId),
    #[error("process {0} does not exist")]
    NoSuchProcess(GPid),
    #[error("message of {size} bytes exceeds the transport cap of {cap} bytes")]
    MsgTooLarge { size: u64, cap: u64 },
    #[error("port {port} already bound by {owner}")]
    AddrInUse { owner: GPid, port: u16 },
    #[error("operation `{op}` not allowed in state {state}")]
    BadState {
        op: &'static str,
        state: &'static str,
    },
    #[error("connection refused by {0}:{1}")]
    ConnRefused(GPid, u16),
    #[error("operation would block")]
    WouldBlock,
    #[error("cannot schedule at t={at} before current time t={now}")]
    TimeTravel { at: f64, now: f64 },
    #[error("no such socket {0}")]
    NoSuchSocket(u64),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid scenario: {}", join_fields(.0))]
    InvalidScenario(Vec<FieldError>),
    #[error("no solution: {0}")]
    NoSolution(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier, e.g. `E_MSG_TOO_LARGE`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::BadNode(_) => "E_BAD_NODE",
            Error::NoSuchProcess(_) => "E_NO_SUCH_PROCESS",
            Error::MsgTooLarge { .. } => "E_MSG_TOO_LARGE",
            Error::AddrInUse { .. } => "E_ADDR_IN_USE",
            Error::BadState { .. } => "E_BAD_STATE",
            Error::ConnRefused(..) => "E_CONN_REFUSED",
            Error::WouldBlock => "E_WOULD_BLOCK",
            Error::TimeTravel { .. } => "E_TIME_TRAVEL",
            Error::NoSuchSocket(_) => "E_NO_SUCH_SOCKET",
            Error::InvalidTopology(_) => "E_INVALID_TOPOLOGY",
            Error::InvalidScenario(_) => "E_INVALID_SCENARIO",
            Error::NoSolution(_) => "E_NO_SOLUTION",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}

fn join_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
