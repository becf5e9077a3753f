use std::fmt;

use taf_core::Error as CoreError;

/// Failure category; each maps to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Io,
    Dimension,
    Numeric,
    Other,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Other => 1,
            Kind::Config => 2,
            Kind::Io => 3,
            Kind::Dimension => 4,
            Kind::Numeric => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Io => "io",
            Kind::Dimension => "dimension",
            Kind::Numeric => "numeric",
            Kind::Other => "other",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub msg: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: Kind, msg: impl Into<String>) -> Self {
        Self { kind, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::new(Kind::Config, msg)
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Self::new(Kind::Io, format!("{}: {err}", path.display()))
    }
}

/// `error: kind=<kind> msg=<message>` on a single line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg: String = self.msg.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error: kind={} msg={msg}", self.kind.name())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::InvalidArgument(_) | CoreError::Infeasible(_) => Kind::Config,
            CoreError::Io { .. }
            | CoreError::UnexpectedEof { .. }
            | CoreError::Format { .. }
            | CoreError::Parse { .. }
            | CoreError::Json(_) => Kind::Io,
            CoreError::ShapeMismatch { .. } | CoreError::SequenceTooShort { .. } | CoreError::EmptySequence => {
                Kind::Dimension
            }
            CoreError::NonFiniteCode { .. }
            | CoreError::TransportOverflow
            | CoreError::NotConverged { .. }
            | CoreError::NonFiniteActivation { .. }
            | CoreError::NonFiniteGradient(_) => Kind::Numeric,
            CoreError::InvalidTranscript(_) | CoreError::MissingTrace(_) | CoreError::EmptyDataset => Kind::Other,
        };
        Self::new(kind, e.to_string())
    }
}
