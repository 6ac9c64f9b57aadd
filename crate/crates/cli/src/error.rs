use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] pimm::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit status: 2 configuration, 3 data validation, 4 numeric
    /// failure, 1 I/O and anything else.
    pub fn exit_code(&self) -> i32 {
        use pimm::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Validation(_) | E::Parse { .. } | E::UndefinedMetric(_) => 3,
                E::Numeric(_) | E::NonFinite { .. } => 4,
                E::Io { .. } | E::Shape { .. } | E::Contract(_) | E::Checkpoint(_) => 1,
            },
        }
    }
}
