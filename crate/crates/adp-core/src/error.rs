use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum AdpError {
    /// Tensor shapes do not conform for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation required a scalar tensor and got something else.
    #[error("{op} requires a scalar tensor, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    /// Invalid value for a domain type (negative Θ entry, non-simplex label...).
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    /// Non-finite number where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Config file problem; carries the offending field name.
    #[error("config field `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk container or CSV.
    #[error("bad file format in {path}: {detail}")]
    Format { path: String, detail: String },
}

impl AdpError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AdpError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        AdpError::Invalid {
            what,
            detail: detail.into(),
        }
    }
}
