use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("blob error: {0}")]
    Blob(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("plan infeasible for `{target}`: {reason}")]
    PlanInfeasible { target: String, reason: String },
    #[error("verification mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn infeasible(target: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::PlanInfeasible {
            target: target.into(),
            reason: reason.into(),
        }
    }
}
