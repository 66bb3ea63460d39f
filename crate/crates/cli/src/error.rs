use geotrust_core::{Error, ErrorClass};
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Server(#[source] std::io::Error),
}

impl CliError {
    /// Process exit status: 2 config, 3 data, 4 internal.
    pub fn exit_code(&self) -> i32 {
        let class = match self {
            CliError::Core(e) => e.class(),
            CliError::Bind { .. } => ErrorClass::Data,
            CliError::Server(_) => ErrorClass::Internal,
        };
        match class {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Internal => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::SingleClass).exit_code(), 3);
        assert_eq!(CliError::from(Error::MissingStage("fit".into())).exit_code(), 4);
        let bind = CliError::Bind {
            addr: "127.0.0.1:1".into(),
            source: std::io::Error::from(std::io::ErrorKind::AddrInUse),
        };
        assert_eq!(bind.exit_code(), 3);
    }
}
