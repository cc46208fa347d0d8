pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),

    /// The request is well formed but does not fit the session's state,
    /// e.g. a stale trial index or a paused session.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid study: {0}")]
    Invalid(String),

    #[error("nothing to export: {0}")]
    EmptyExport(String),

    #[error(transparent)]
    Core(#[from] dlmap_core::Error),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Contract(_) => "contract",
            ServiceError::Invalid(_) => "invalid",
            ServiceError::EmptyExport(_) => "empty_export",
            ServiceError::Core(dlmap_core::Error::NotFound(_)) => "not_found",
            ServiceError::Core(dlmap_core::Error::Contract(_)) => "contract",
            ServiceError::Core(dlmap_core::Error::Config(_)) => "invalid",
            ServiceError::Core(_) | ServiceError::Io(_) => "internal",
        }
    }
}
