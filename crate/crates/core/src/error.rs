use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("vocab too small: target {target} is below alphabet size {alphabet}")]
    VocabTooSmall { target: usize, alphabet: usize },

    #[error("symbol {symbol:?} at offset {offset} is not in the tokenizer alphabet")]
    OutOfAlphabet { symbol: char, offset: usize },

    #[error("document {index}: {source}")]
    Document {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence length {len} outside [{min}, {max}]")]
    Length { len: usize, min: usize, max: usize },

    #[error("nothing to predict: sequence has length {0}")]
    NothingToPredict(usize),

    #[error("token id {id} out of range for size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("no unique stationary distribution (chain is reducible)")]
    Reducible,

    #[error("enumeration guard exceeded: {states}^{n} paths")]
    EnumerationGuard { states: usize, n: usize },

    #[error("negative entropy rate {0}")]
    NegativeEntropy(f64),

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_document(self, index: usize) -> Error {
        Error::Document {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
