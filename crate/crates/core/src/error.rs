use thiserror::Error;

use crate::ark::ArkError;
use crate::domain::RunState;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("verbose id {0:?} still taken after suffixing")]
    DuplicateVerboseId(String),
    #[error("site {0} is completed and accepts no more contributions")]
    SiteCompleted(i64),
    #[error("contributor {0} is banned")]
    ContributorBanned(i64),
    #[error("contribution has no images")]
    EmptyContribution,
    #[error("illegal transition: {event} from {from}")]
    IllegalTransition { from: RunState, event: String },
    #[error("site {0} already has an active run")]
    RunAlreadyActive(i64),
    #[error("{entity} {id} not found")]
    NotFound { entity: &'static str, id: String },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error(transparent)]
    Ark(#[from] ArkError),
    #[error("database error: {0}")]
    Db(#[from] rusqlite::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn not_found(entity: &'static str, id: impl ToString) -> Self {
        Error::NotFound {
            entity,
            id: id.to_string(),
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation(_) => "VALIDATION",
            Error::DuplicateVerboseId(_) => "DUPLICATE_VERBOSE_ID",
            Error::SiteCompleted(_) => "SITE_COMPLETED",
            Error::ContributorBanned(_) => "CONTRIBUTOR_BANNED",
            Error::EmptyContribution => "EMPTY_CONTRIBUTION",
            Error::IllegalTransition { .. } => "ILLEGAL_TRANSITION",
            Error::RunAlreadyActive(_) => "RUN_ALREADY_ACTIVE",
            Error::NotFound { .. } => "NOT_FOUND",
            Error::Conflict(_) => "CONFLICT",
            Error::Ark(ArkError::Malformed(_)) => "MALFORMED",
            Error::Ark(ArkError::BadCheck { .. }) => "BAD_CHECK",
            Error::Ark(ArkError::Exhausted(_)) => "EXHAUSTED",
            Error::Ark(ArkError::Unknown(_)) => "UNKNOWN_ARK",
            Error::Ark(ArkError::AlreadyBound(_)) => "ALREADY_BOUND",
            Error::Db(_) => "DB",
            Error::Serde(_) => "SERDE",
            Error::Io(_) => "IO",
            Error::Config(_) => "CONFIG",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
