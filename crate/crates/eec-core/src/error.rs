use core::fmt;

/// Errors shared across the crate.
///
/// All fallible operations validate their inputs up front and return one of
/// these instead of panicking, so callers (including the CLI) can surface a
/// precise message.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two feature maps or masks that must share a spatial grid do not.
    SpatialMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    /// A channel count differs from what an operation requires.
    ChannelMismatch { expected: usize, got: usize },
    /// A flat buffer does not have the length implied by its shape.
    DataLength { expected: usize, got: usize },
    /// A shape dimension (height, width, channels, capacity, ...) is zero
    /// where a positive value is required.
    ZeroDim { what: &'static str },
    /// A value that must be finite is NaN or infinite.
    NonFinite { context: &'static str },
    /// A configuration value is outside its documented range.
    InvalidConfig { what: &'static str },
    /// A channel slice `[start, start+len)` falls outside the map.
    SliceOutOfRange {
        start: usize,
        len: usize,
        channels: usize,
    },
    /// A frame index does not strictly increase within a memory bank.
    NonMonotonicFrame { last: u32, got: u32 },
    /// A memory bank is not in the state an operation requires
    /// (e.g. compression needs exactly capacity + 1 entries).
    BankLength { expected: usize, got: usize },
    /// A label is outside `[0, 1]`.
    LabelRange { got: f64 },
    /// Attention readout was asked to run with no memory tokens.
    EmptyTokens,
    /// A cached forward pass does not match the parameters or shapes a
    /// backward pass was called with.
    StaleCache { what: &'static str },
    /// Toy training produced a non-finite loss.
    TrainingDiverged { step: usize, learning_rate: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::SpatialMismatch { a, b } => {
                write!(f, "spatial shapes differ: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)
            }
            Error::ChannelMismatch { expected, got } => {
                write!(f, "expected {expected} channels, got {got}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "buffer length {got} does not match shape (need {expected})")
            }
            Error::ZeroDim { what } => write!(f, "{what} must be positive"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::InvalidConfig { what } => write!(f, "invalid configuration: {what}"),
            Error::SliceOutOfRange { start, len, channels } => write!(
                f,
                "channel slice [{start}, {}) out of range for {channels} channels",
                start + len
            ),
            Error::NonMonotonicFrame { last, got } => {
                write!(f, "frame index {got} does not increase past {last}")
            }
            Error::BankLength { expected, got } => {
                write!(f, "memory bank holds {got} entries per location, need {expected}")
            }
            Error::LabelRange { got } => write!(f, "label {got} outside [0, 1]"),
            Error::EmptyTokens => write!(f, "attention readout needs at least one memory token"),
            Error::StaleCache { what } => {
                write!(f, "forward cache does not match backward call: {what}")
            }
            Error::TrainingDiverged { step, learning_rate } => write!(
                f,
                "training loss became non-finite at step {step} (learning rate {learning_rate})"
            ),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
