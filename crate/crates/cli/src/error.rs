use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        })
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Io(format!("i/o error on {}: {err}", path.display()))
    }
}

impl From<sae_core::Error> for CliError {
    fn from(e: sae_core::Error) -> Self {
        use sae_core::Error as E;
        match e {
            E::NonFinite(_) => CliError::Numeric(e.to_string()),
            E::Io { .. } | E::Format { .. } | E::Truncated { .. } | E::DataExhausted { .. } => {
                CliError::Io(e.to_string())
            }
            E::Shape { .. } | E::InvalidArgument(_) => CliError::Config(e.to_string()),
        }
    }
}
