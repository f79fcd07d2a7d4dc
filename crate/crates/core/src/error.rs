//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("catalog too small: requested {requested}, have {available}")]
    CatalogSize { requested: usize, available: usize },

    #[error("split sizes sum to {got}, catalog has {expected} categories")]
    SplitSize { expected: usize, got: usize },

    #[error("category `{name}` has point count {count}; minimum is 2")]
    CatalogCountTooSmall { name: String, count: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("scene invariant violated: {0}")]
    SceneInvariant(String),

    #[error("embedding table does not cover category `{0}`")]
    EmbeddingCoverage(String),

    #[error("degenerate (zero-norm) embedding vector{}", match .0 { Some(n) => format!(" for `{n}`"), None => String::new() })]
    DegenerateEmbedding(Option<String>),

    #[error("pca rank {requested} out of range (max {max})")]
    PcaRank { requested: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("negative sampling error: {0}")]
    NegativeSampling(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
