use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] popform::Error),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("plot failed: {0}")]
    Plot(String),
}

impl CliError {
    /// 2 for bad input, 3 for numerical or fit failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_input() => 2,
            CliError::Input(_) => 2,
            _ => 3,
        }
    }
}
