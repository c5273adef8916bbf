use crate::lm::{LmError, TokenId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("seed token {0} is not among the first-token candidates")]
    SeedNotCandidate(TokenId),
    #[error("model produced only whitespace before the word token cap")]
    EmptyWord,
    #[error("distribution has {0} candidates; the margin needs two or a single-token vocabulary")]
    InsufficientCandidates(usize),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("no candidate could be scored by any model")]
    AllCandidatesUnscorable,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
