use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error(
        "matrix of size {dim} not positive definite after jitter {jitter:e} \
         (diagonal range {diag_min:e}..{diag_max:e})"
    )]
    NotPositiveDefinite {
        dim: usize,
        jitter: f64,
        diag_min: f64,
        diag_max: f64,
    },

    #[error("component {component}: {source}")]
    Component {
        component: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("all {} restarts failed: {}", .0.len(), .0.join("; "))]
    FitFailed(Vec<String>),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn in_component(self, component: usize) -> Self {
        Error::Component {
            component,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than numerics.
    pub fn is_input(&self) -> bool {
        match self {
            Error::Input(_) | Error::Parse { .. } | Error::File { .. } | Error::Io(_) | Error::Json(_) => true,
            Error::Component { source, .. } => source.is_input(),
            _ => false,
        }
    }
}
