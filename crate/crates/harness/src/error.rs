use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Diverged(_) => 3,
            HarnessError::Runtime(_) => 4,
        }
    }
}

impl From<fastadv::Error> for HarnessError {
    fn from(e: fastadv::Error) -> Self {
        match e {
            fastadv::Error::Config(_) => HarnessError::Config(e.to_string()),
            fastadv::Error::Divergence { .. } => HarnessError::Diverged(e.to_string()),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
