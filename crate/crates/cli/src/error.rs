//! Stage-qualified errors with stable exit codes.

use std::fmt;
use std::path::Path;

use geovocab_core::distill::DistillError;
use geovocab_core::gateway::GatewayError;
use geovocab_core::reason::ReasonError;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad or missing input data, including absent mock fixtures.
    Data,
    /// The model endpoint failed after retries, or rejected the request.
    Gateway,
    /// Invalid configuration or flags.
    Config,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            Self::Data => 1,
            Self::Gateway => 2,
            Self::Config => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Data,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Config,
            message: message.into(),
        }
    }

    /// Prefixes the message with `context: `.
    pub fn context(mut self, context: impl fmt::Display) -> Self {
        self.message = format!("{context}: {}", self.message);
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

pub fn gateway_kind(e: &GatewayError) -> ExitKind {
    match e {
        GatewayError::FixtureMissing { .. } | GatewayError::FixtureIo { .. } => ExitKind::Data,
        e if e.is_config() => ExitKind::Config,
        _ => ExitKind::Gateway,
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        Self {
            kind: gateway_kind(&e),
            message: e.to_string(),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        let kind = match (&e, e.gateway_error()) {
            (_, Some(g)) => gateway_kind(g),
            (DistillError::Prompt(_), None) => ExitKind::Config,
            _ => ExitKind::Data,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<ReasonError> for CliError {
    fn from(e: ReasonError) -> Self {
        let kind = match (&e, e.gateway_error()) {
            (_, Some(g)) => gateway_kind(g),
            (ReasonError::Prompt(_), None) => ExitKind::Config,
            _ => ExitKind::Data,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

/// Attaches a path to any displayable error as a data error.
pub fn at_path<E: fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::data(format!("{}: {e}", path.display()))
}
