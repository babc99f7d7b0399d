use alloc::string::String;
use core::fmt;

/// Errors shared by all solver modules.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A precondition on an argument was violated.
    InvalidArgument(String),
    /// A local basis system was numerically singular.
    DegenerateBasis { cell: usize, condition: f64 },
    /// The nonlinear driver returned a non-finite value at the given point.
    DriverEvaluation {
        x: f64,
        t: f64,
        w: f64,
        u: f64,
        v: f64,
        psi: f64,
    },
    /// A training batch was malformed (e.g. too small for batch statistics).
    InvalidBatch(String),
    /// A training loss became non-finite.
    TrainingDivergence {
        stage: usize,
        step: usize,
        last_loss: f64,
    },
    /// A regression system was too ill-conditioned to trust.
    RankDeficient { step: usize, condition: f64 },
    /// A relative error was requested against a zero reference.
    ZeroReference,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::DegenerateBasis { cell, condition } => write!(
                f,
                "degenerate basis on cell {cell} (condition estimate {condition:.3e})"
            ),
            Error::DriverEvaluation { x, t, w, u, v, psi } => write!(
                f,
                "driver returned a non-finite value at x={x}, t={t}, w={w}, u={u}, v={v}, psi={psi}"
            ),
            Error::InvalidBatch(msg) => write!(f, "invalid batch: {msg}"),
            Error::TrainingDivergence {
                stage,
                step,
                last_loss,
            } => write!(
                f,
                "training diverged at stage {stage}, step {step} (last finite loss {last_loss:.6e})"
            ),
            Error::RankDeficient { step, condition } => write!(
                f,
                "regression at step {step} is rank deficient (condition estimate {condition:.3e}); \
                 lower the polynomial degree or raise the path count"
            ),
            Error::ZeroReference => write!(f, "relative error undefined: reference has zero norm"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
