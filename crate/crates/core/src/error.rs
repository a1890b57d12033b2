use thiserror::Error;

/// Errors produced by the corpus, cipher, solver, model and sweep layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("character {0:?} is outside the 27-symbol alphabet")]
    OutOfAlphabet(char),
    #[error("token id {0} is outside [0, 28]")]
    InvalidTokenId(u32),
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
    #[error("max_len must be at least 2, got {0}")]
    MaxLenTooSmall(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("not a permutation: {0}")]
    NotAPermutation(String),
    #[error("invalid n-gram order {0}, expected 1, 2 or 3")]
    InvalidOrder(usize),
    #[error("smoothing constant must be positive, got {0}")]
    InvalidSmoothing(f64),
    #[error("iteration budget must be positive")]
    ZeroBudget,
    #[error("alphabet of size {size} exceeds brute-force limit {max}")]
    AlphabetTooLarge { size: usize, max: usize },
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("power-law fit: {0}")]
    Fit(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("run {run_id}: {source}")]
    Run {
        run_id: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
