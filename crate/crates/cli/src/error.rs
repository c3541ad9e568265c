use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or unparseable configuration, or a bad `--set`.
    #[error("{0}")]
    Config(String),

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("numerical failure: {0}")]
    Numerical(mdlab::Error),

    #[error(transparent)]
    Core(mdlab::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    /// Stable process exit code.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => 1,
            CliError::MissingArtifact(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<mdlab::Error> for CliError {
    fn from(e: mdlab::Error) -> Self {
        use mdlab::Error as E;
        match e {
            E::NonFinite { .. } | E::Diverged { .. } | E::DegeneratePrior(_) | E::NoConvergence { .. } => {
                CliError::Numerical(e)
            }
            other => CliError::Core(other),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io {
            context: "csv".into(),
            source: e.into(),
        }
    }
}
