use std::io;

use thiserror::Error;

use crate::numcore::NumError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("training diverged: {0}")]
    NonFinite(String),
    #[error("{what} (seed {seed}) failed: {source}")]
    Run { what: String, seed: u64, source: Box<Error> },
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
