use crate::filters::FilterId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("parameter out of bounds: {filter} = {value}")]
    ParameterOutOfBounds { filter: FilterId, value: f64 },

    #[error("unknown filter `{0}`")]
    UnknownFilter(String),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("encode failure: {0}")]
    Encode(String),

    #[error("assessor load failure: {0}")]
    AssessorLoad(String),

    #[error("assessor failure: {0}")]
    Assessor(String),

    #[error("divergent gradient")]
    DivergentGradient,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("busy")]
    Busy,

    #[error("invalid session state: {0}")]
    InvalidState(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
