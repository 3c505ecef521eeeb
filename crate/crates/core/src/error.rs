use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::embedding::EmbedError;
use crate::mutation::MutationParseError;
use crate::pipeline::{ResponderError, TemplateError};
use crate::vectorstore::StoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error for callers that drive the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Mutation(#[from] MutationParseError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Responder(#[from] ResponderError),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("unknown protein `{0}`")]
    UnknownProtein(String),
    #[error("{what} is empty")]
    Empty { what: &'static str },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
