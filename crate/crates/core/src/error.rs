use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Axis index beyond the tensor rank.
    Axis { axis: usize, rank: usize },
    /// Kernel geometry the convolution routines do not handle (even sizes).
    Geometry { kh: usize, kw: usize },
    EmptySequence,
    Config(String),
    SignalTooShort { len: usize, frame_len: usize },
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, step: usize, loss: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Axis { axis, rank } => write!(f, "axis {axis} out of range for rank {rank}"),
            Error::Geometry { kh, kw } => {
                write!(f, "unsupported kernel geometry {kh}x{kw}: sizes must be odd")
            }
            Error::EmptySequence => f.write_str("attention over an empty sequence"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::SignalTooShort { len, frame_len } => {
                write!(f, "signal of {len} samples is shorter than one frame ({frame_len})")
            }
            Error::Diverged { epoch, step, loss } => {
                write!(f, "training diverged at epoch {epoch}, step {step}: loss = {loss}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
