use std::fmt;

use thiserror::Error;

/// Coarse error classes; the CLI maps these onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no trials")]
    NoTrials,

    #[error("duplicate arm {arm} for trial `{trial_id}`")]
    DuplicateArm { trial_id: String, arm: u8 },

    #[error("negative variance for `{field}` in trial `{trial_id}` arm {arm}")]
    NegativeVariance {
        trial_id: String,
        arm: u8,
        field: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unidentifiable model: {0}")]
    Unidentifiable(String),

    #[error("singular system; collinear columns: {}", .columns.join(", "))]
    Singular { columns: Vec<String> },

    #[error("arm {arm} unestimable: total weight is zero")]
    ArmUnestimable { arm: u8 },

    #[error("design mismatch: {0}")]
    DesignMismatch(String),

    #[error("logistic fit did not converge after {iterations} iterations (ridge up to {ridge_lambda:e})")]
    NonConvergence { iterations: usize, ridge_lambda: f64 },

    #[error(
        "non-finite density-ratio weight for subject {index}; the target population is not \
         covered by the pooled data, estimation should be performed using only the target trial"
    )]
    NonFiniteWeight { index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Io(_) => ErrorClass::Config,
            Error::Singular { .. }
            | Error::NonConvergence { .. }
            | Error::NonFiniteWeight { .. }
            | Error::ArmUnestimable { .. }
            | Error::Unidentifiable(_) => ErrorClass::Numerical,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    /// Wrap with the name of the pipeline stage that produced the error.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
