//! Exit-code classification.

use std::fmt;

use planforge_core::evalharness::EvalError;
use planforge_core::ingest::PipelineError;
use planforge_core::orchestrator::{CheckpointError, RunError};
use planforge_core::shardstore::ShardError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Data = 1,
    Usage = 2,
    Io = 3,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExitKind::Data => "data",
            ExitKind::Usage => "usage",
            ExitKind::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ExitKind::Data,
            error: error.into(),
        }
    }

    pub fn io(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ExitKind::Io,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self {
            kind: ExitKind::Usage,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self {
            kind: self.kind,
            error: self.error.context(msg),
        }
    }
}

fn shard_kind(e: &ShardError) -> ExitKind {
    match e {
        ShardError::Io { .. } => ExitKind::Io,
        _ => ExitKind::Data,
    }
}

impl From<ShardError> for Failure {
    fn from(e: ShardError) -> Self {
        Self {
            kind: shard_kind(&e),
            error: e.into(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let kind = match &e {
            RunError::Io { .. } | RunError::Checkpoint(CheckpointError::Io { .. }) => ExitKind::Io,
            RunError::Shard(s) => shard_kind(s),
            _ => ExitKind::Data,
        };
        Self { kind, error: e.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Io { .. } | PipelineError::Sink(_) => ExitKind::Io,
            PipelineError::Manifest(_) => ExitKind::Data,
        };
        Self { kind, error: e.into() }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::Io { .. } => ExitKind::Io,
            _ => ExitKind::Data,
        };
        Self { kind, error: e.into() }
    }
}

pub type CmdResult = Result<serde_json::Value, Failure>;
