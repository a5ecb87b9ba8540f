use thiserror::Error;

use crate::data_model::ModelSet;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error at line {line}: {message}")]
    Input { line: u64, message: String },

    /// The submodel Hessian is not safely invertible.
    #[error("singular system for model {model}: minimum eigenvalue {min_eigenvalue:.3e}")]
    Singular { model: ModelSet, min_eigenvalue: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: u8,
        #[source]
        source: Box<Error>,
    },

    #[error("bootstrap unstable: {rejected} of {attempted} draws rejected")]
    BootstrapUnstable { rejected: usize, attempted: usize },

    #[error("unsupported scenario: {0}")]
    UnsupportedScenario(String),

    #[error("replication {rep} (seed {seed}) failed: {source}")]
    Replication {
        rep: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn in_stage(self, stage: u8) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, looking through stage and replication wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Replication { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 for configuration and input problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Singular { .. } | Error::Numerical(_) | Error::BootstrapUnstable { .. } => 3,
            _ => 2,
        }
    }
}
