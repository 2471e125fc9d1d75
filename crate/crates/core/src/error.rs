use std::io;

use crate::corpus::Language;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),

    #[error("token id {id} out of range (limit {limit})")]
    TokenOutOfRange { id: usize, limit: usize },

    #[error("stream of {len} tokens is too short for block size {block_size}")]
    StreamTooShort { len: usize, block_size: usize },

    #[error("no crop with all-{0} targets found within the retry budget")]
    LanguageFilterUnsatisfiable(Language),

    #[error("empty support: every logit is -inf")]
    EmptySupport,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("forward cache is stale or does not match this model")]
    StaleCache,

    #[error("alpha-threshold requires tied head")]
    AlphaRequiresTiedHead,

    #[error("separated update requested on a model with joint embedding storage")]
    JointStorage,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no validation positions for language {0}")]
    NoPositions(Language),

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off})")]
    EigenNoConvergence { sweeps: usize, off: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
