use thiserror::Error;

/// Errors raised across the reactor model, linearization and controller.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("gel-effect solve did not converge (last relative residual {residual:e})")]
    CcsNotConverged { residual: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("gain matrix is not positive definite ({0}); use strictly positive move weights")]
    SingularGain(String),

    #[error("at sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Qualify a parameter name with the section it was read from.
    pub(crate) fn in_section(self, section: &str) -> Self {
        match self {
            Error::InvalidParameter { name, reason } if !name.contains('.') => {
                Error::InvalidParameter {
                    name: format!("{section}.{name}"),
                    reason,
                }
            }
            other => other,
        }
    }

    pub(crate) fn at_sample(self, index: usize) -> Self {
        Error::AtSample {
            index,
            source: Box::new(self),
        }
    }

    /// True for failures caused by bad input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::InvalidParameter { .. } | Error::Config(_) | Error::Range(_) => true,
            Error::AtSample { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
