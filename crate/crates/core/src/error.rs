use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero matrix has no singular spectrum")]
    ZeroMatrix,

    #[error("channel coefficient {h} is below the floor {floor}")]
    ChannelBelowFloor { h: f64, floor: f64 },

    #[error("power constraint violated for device {device}: (alpha*C)^2 = {power} > P = {p_max}")]
    PowerViolation {
        device: usize,
        power: f64,
        p_max: f64,
    },

    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
