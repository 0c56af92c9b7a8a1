use thiserror::Error;

use crate::topology::{NodeId, TunnelId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("IAB node {node} has no candidate parent above the outage threshold")]
    Attachment { node: NodeId },

    #[error("topology error: {0}")]
    Structure(String),

    #[error("scheduling causality violated at node {node}: {detail}")]
    Causality { node: NodeId, detail: String },

    #[error("node {node} has no route for tunnel {tunnel}")]
    Routing { node: NodeId, tunnel: TunnelId },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
