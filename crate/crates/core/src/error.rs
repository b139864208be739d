use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("empty loss: the loss mask selects no positions")]
    EmptyLoss,
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("context length {len} exceeds limit {limit}")]
    ContextLength { len: usize, limit: usize },
    #[error("role error: {0}")]
    Role(String),
    #[error("empty answer span in turn {0}")]
    EmptyAnswer(usize),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("pairing error: {images} images supplied for {slots} image placeholders")]
    Pairing { images: usize, slots: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("vocab error: {0}")]
    Vocab(String),
    #[error("rank sheet error: {0}")]
    RankSheet(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
