//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for all toolkit operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument supplied by the caller.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A corpus record failed to parse. Carries the record index and the
    /// field that was missing or malformed.
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },

    /// The corpus file parsed but contained no records.
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// CSV (de)serialization failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Failure in the embedding or attribution store layer.
    #[error("storage error: {0}")]
    Storage(String),

    /// A referenced text was not present in an embedding cache.
    #[error("cache miss: no embedding for text hash {text_hash} in cache {cache}")]
    CacheMiss { text_hash: String, cache: String },

    /// Cache on disk does not match the requested model/pooling/topology.
    #[error("cache header mismatch: {0}")]
    CacheHeaderMismatch(String),

    /// Pooling strategy is illegal for the model architecture.
    #[error("pooling mismatch: {0}")]
    PoolingMismatch(String),

    /// Probe training produced a non-finite loss.
    #[error("probe training diverged (non-finite loss) at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// Not enough data to run a statistical test.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A fine-tuned result had no matching baseline result (or vice versa).
    #[error("pairing error: {0}")]
    Pairing(String),

    /// Two artifacts cannot be compared (e.g. different layer counts).
    #[error("comparison error: {0}")]
    Comparison(String),

    /// A numeric invariant was violated (NaN/Inf where finite required).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Attribution produced a non-finite gradient for a neuron.
    #[error("attribution error at layer {layer} {sublayer} neuron {index}: {reason}")]
    Attribution {
        layer: usize,
        sublayer: String,
        index: usize,
        reason: String,
    },

    /// Environment problem (model file unreadable, bad config, ...).
    #[error("environment error: {0}")]
    Environment(String),
}

pub type Result<T> = std::result::Result<T, Error>;
