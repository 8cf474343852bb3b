use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] discoprop::Error),
}

impl CliError {
    /// 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(discoprop::Error::Diverged { .. } | discoprop::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }

    pub fn report(&self) -> ExitCode {
        eprintln!("error: {self}");
        if let CliError::Core(discoprop::Error::Diverged { last_finite: Some(last), .. }) = self {
            if let Ok(json) = serde_json::to_string(last) {
                eprintln!("last finite loss decomposition: {json}");
            }
        }
        ExitCode::from(self.exit_code())
    }
}
