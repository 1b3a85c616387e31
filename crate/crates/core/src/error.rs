use std::path::PathBuf;

/// Which side of a transport kernel collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelAxis {
    Row,
    Column,
}

impl std::fmt::Display for KernelAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelAxis::Row => f.write_str("row"),
            KernelAxis::Column => f.write_str("column"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate kernel: {axis} {index} underflowed to zero (lambda too large for the similarity scale)")]
    DegenerateKernel { axis: KernelAxis, index: usize },

    #[error("clustering class {class}: {source}")]
    Solver {
        class: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: parse error at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips `Solver`/`Step` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Solver { source, .. } | Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the CLI: 2 invalid config/argument, 3 solver
    /// failure, 4 I/O or file-format failure.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::DegenerateKernel { .. } => 3,
            Error::Parse { .. } | Error::Format { .. } | Error::Io { .. } => 4,
            Error::Solver { .. } | Error::Step { .. } => unreachable!("root() unwraps wrappers"),
        }
    }
}
