use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("lens parse error: {0}")]
    Parse(String),

    #[error("lens validation error: {0}")]
    Validation(String),

    #[error("wavelength {0} nm outside supported band [380, 780] nm")]
    WavelengthOutOfBand(f64),

    #[error("dataset format error: {0}")]
    Dataset(String),

    #[error("model format error: {0}")]
    Model(String),

    #[error("no valid seed found for path {path_id} after {budget} uniform trials")]
    NoValidSeed { path_id: u64, budget: u64 },

    #[error("training diverged: {0}")]
    Training(String),

    #[error("image format error: {0}")]
    Image(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
