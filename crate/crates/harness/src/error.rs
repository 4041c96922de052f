use thiserror::Error;

/// Process exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] gct_core::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Data(_) => EXIT_DATA,
            HarnessError::Numeric(_) => EXIT_NUMERIC,
            HarnessError::Core(gct_core::Error::NonFinite(_)) => EXIT_NUMERIC,
            HarnessError::Io(_) | HarnessError::Core(_) => EXIT_OTHER,
        }
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        HarnessError::Config(e.to_string())
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        HarnessError::Data(e.to_string())
    }
}

pub type HarnessResult<T> = Result<T, HarnessError>;
