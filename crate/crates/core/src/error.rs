use std::fmt;
use std::io;

/// Errors raised by the numeric, codec, model and I/O layers.
#[derive(Debug)]
pub enum Error {
    /// Two shapes that must agree do not.
    Dimension {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A value is outside the domain an operation is defined on.
    Domain(String),
    /// A chain of convolutions cannot be merged into one.
    Composition(String),
    /// Spike tensor or binary train holds an out-of-range value.
    Codec(String),
    /// Malformed binary file; `offset` is the byte position of the bad record.
    Parse { offset: usize, message: String },
    /// Inconsistent model configuration or weights.
    Config(String),
    /// Operation not allowed in the current model mode.
    Mode(String),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, step: usize, loss: f64 },
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(context: &'static str, expected: &[usize], found: &[usize]) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension {
                context,
                expected,
                found,
            } => write!(f, "{context}: expected shape {expected:?}, found {found:?}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Composition(msg) => write!(f, "cannot compose convolutions: {msg}"),
            Error::Codec(msg) => write!(f, "spike codec error: {msg}"),
            Error::Parse { offset, message } => {
                write!(f, "parse error at byte {offset}: {message}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Mode(msg) => write!(f, "mode error: {msg}"),
            Error::Diverged { epoch, step, loss } => write!(
                f,
                "training diverged at epoch {epoch}, step {step}: loss = {loss}"
            ),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
