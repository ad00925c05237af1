use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("window of {window} px does not fit in a {width}x{height} image")]
    WindowTooLarge {
        window: u32,
        width: u32,
        height: u32,
    },

    #[error("window ({x}, {y}) of side {size} lies outside the {width}x{height} image")]
    OutOfBounds {
        x: i64,
        y: i64,
        size: u32,
        width: u32,
        height: u32,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("tensor {index} has shape {found}, expected {expected}")]
    TensorShape {
        index: usize,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model asset {path}: {reason}")]
    Asset { path: PathBuf, reason: String },

    #[error("descriptor mismatch for {what}: expected {expected}, found {found}")]
    Descriptor {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("append error: {0}")]
    Append(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("store holds no rows")]
    EmptyStore,

    #[error("training data needs at least two distinct labels, found {found}")]
    DegenerateLabels { found: usize },

    #[error("non-finite feature value in row {row}")]
    NonFinite { row: usize },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
