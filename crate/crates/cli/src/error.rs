use fia_core::FiaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("selftest: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

fn is_non_finite(e: &FiaError) -> bool {
    match e {
        FiaError::NonFinite(_) => true,
        FiaError::Step { source, .. } => is_non_finite(source),
        _ => false,
    }
}

impl From<FiaError> for CliError {
    fn from(e: FiaError) -> Self {
        let msg = e.to_string();
        match e {
            _ if is_non_finite(&e) => CliError::Numeric(msg),
            FiaError::Io(_) | FiaError::Format(_) => CliError::Io(msg),
            _ => CliError::Config(msg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let nested = FiaError::Step {
            step: 3,
            source: Box::new(FiaError::NonFinite("velocity".into())),
        };
        assert_eq!(CliError::from(nested).exit_code(), 3);
        assert_eq!(CliError::from(FiaError::Format("bad magic".into())).exit_code(), 2);
        assert_eq!(CliError::from(FiaError::InvalidArgument("x".into())).exit_code(), 1);
    }
}
