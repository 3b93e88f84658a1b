use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: lhs={lhs:?}, rhs={rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("cannot extract a noun/verb pair from clause {clause:?}")]
    Extraction { clause: String },

    #[error("evaluation produced a non-finite value: {0}")]
    Evaluation(String),

    #[error("degenerate attention for token {token} in frame {frame}: total mass is below epsilon")]
    DegenerateAttention { token: usize, frame: usize },

    #[error("degenerate attention map: {0}")]
    DegenerateMap(String),

    #[error("degenerate pair ({noun}, {verb}): L_pos + L_neg is below epsilon")]
    DegeneratePair { noun: usize, verb: usize },

    #[error("non-finite gradient for loss {loss} at step {step}")]
    Numeric { loss: String, step: usize },

    #[error("guidance failed at step {step}, iteration {iteration}: {source}")]
    Guidance {
        step: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// Strips [`Error::Guidance`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Guidance { source, .. } => source.root(),
            other => other,
        }
    }
}
