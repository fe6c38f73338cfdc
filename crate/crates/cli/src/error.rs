use std::process::ExitCode;

use thiserror::Error;

/// CLI failure with its process exit code: 2 configuration, 3 audio or
/// file format, 4 checkpoint or prerequisite, 1 anything else.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] bandsplit::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use bandsplit::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Format(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Io { .. } | E::Format(_) | E::SampleRate { .. } | E::Shape(_) | E::InvalidInput(_) => 3,
                E::Checkpoint(_) | E::Prerequisite(_) => 4,
                _ => 1,
            },
        }
    }

    pub fn report(&self) -> ExitCode {
        eprintln!("error: {self}");
        ExitCode::from(self.exit_code())
    }
}

pub type CliResult<T> = Result<T, CliError>;
