use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable or malformed input file.
    #[error("{}: {msg}", path.display())]
    Input { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
    /// The command ran but its check did not pass.
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] pointformer::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn input(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CliError::Input {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use pointformer::Error as E;
        match self {
            CliError::Input { .. } | CliError::Usage(_) | CliError::Io { .. } => 2,
            CliError::Core(E::Argument(_) | E::Config(_)) => 2,
            CliError::Failed(_) | CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
