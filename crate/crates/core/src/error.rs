use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller broke a dimensional or structural precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers themselves rather than by the setup.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericDomain(_) | Error::Generation(_))
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NumericDomain(format!(
            "{what}: non-finite value {} at index {i}",
            values[i]
        ))),
    }
}
