use std::fmt;

use motionguide::Error;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

pub const EXIT_PARSE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

impl Failure {
    pub fn new(code: i32, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
        }
    }

    pub fn io(context: impl fmt::Display, e: std::io::Error) -> Self {
        Self::new(EXIT_IO, "io", format!("{context}: {e}"))
    }

    /// Single line for the end of the output; newlines would break parsing.
    pub fn line(&self) -> String {
        let msg = self.message.replace(['\n', '\r'], " ");
        format!("error[{}] {}: {msg}", self.code, self.kind)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match e.root() {
            Error::Parse { .. } => (EXIT_PARSE, "parse"),
            Error::Input(_) | Error::Extraction { .. } | Error::Json(_) => (EXIT_PARSE, "input"),
            Error::Io(_) => (EXIT_IO, "io"),
            Error::Dimension { .. } | Error::Contract(_) => (EXIT_NUMERIC, "internal"),
            Error::Evaluation(_)
            | Error::DegenerateAttention { .. }
            | Error::DegenerateMap(_)
            | Error::DegeneratePair { .. }
            | Error::Numeric { .. } => (EXIT_NUMERIC, "numeric"),
            Error::Guidance { .. } => unreachable!("root strips guidance wrappers"),
        };
        Self::new(code, kind, e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

pub type CliResult<T = ()> = std::result::Result<T, Failure>;
