use std::io;

use hps_core::{CoreError, DecodeError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Invalid(#[from] CoreError),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("table `{0}` is already registered")]
    TableExists(String),
    #[error("table name `{0}` cannot be used as a directory name")]
    UnsafeTableName(String),
    #[error("tier fault: {0}")]
    TierFault(String),
    #[error("corrupt data: {0}")]
    Corrupt(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("server error: {0}")]
    Remote(String),
}

impl Error {
    pub fn tier(e: impl std::fmt::Display) -> Self {
        Error::TierFault(e.to_string())
    }

    pub fn is_tier_fault(&self) -> bool {
        matches!(self, Error::TierFault(_) | Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
