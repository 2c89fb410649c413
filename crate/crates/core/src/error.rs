use std::fmt;

/// Errors surfaced by grid construction, solvers and the experiment driver.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration (grid sizes, parameter ranges, profile specs).
    Config(String),
    /// Field length does not match the grid / component count it is used with.
    ShapeMismatch { expected: usize, got: usize },
    /// Operation applied to a field with the wrong number of components.
    ComponentMismatch { expected: usize, got: usize },
    /// Advective CFL bound violated; `required` is the largest admissible step.
    CflViolation { dt: f64, required: f64 },
    /// A weighted norm is not finite at the requested analyticity radius.
    NotAnalytic { delta: f64 },
    /// The radius schedule delta_in - M*t became negative before time `t`.
    RadiusExhausted { t: f64, delta: f64 },
    /// Iteration differences grew for several consecutive steps.
    SchemeDivergence { iteration: usize },
    /// Non-finite value produced at the given time step.
    NanDetected { step: usize },
    /// Convolution tail truncated with too large an error budget.
    TailTruncation { required_extent: f64 },
    /// Rate fit asked for with too few usable points.
    InsufficientPoints { needed: usize, got: usize },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected} values, got {got}")
            }
            Error::ComponentMismatch { expected, got } => {
                write!(f, "component mismatch: expected {expected}, got {got}")
            }
            Error::CflViolation { dt, required } => {
                write!(f, "CFL violation: dt = {dt:.3e} exceeds required dt <= {required:.3e}")
            }
            Error::NotAnalytic { delta } => {
                write!(f, "norm not finite at radius delta = {delta}")
            }
            Error::RadiusExhausted { t, delta } => {
                write!(f, "analytic radius exhausted: delta({t}) = {delta} < 0")
            }
            Error::SchemeDivergence { iteration } => {
                write!(f, "scheme divergence at iteration {iteration}: T or M too aggressive")
            }
            Error::NanDetected { step } => write!(f, "non-finite value at step {step}"),
            Error::TailTruncation { required_extent } => {
                write!(f, "convolution tail budget exceeded; extend grid to at least {required_extent}")
            }
            Error::InsufficientPoints { needed, got } => {
                write!(f, "need at least {needed} usable points, got {got}")
            }
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

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
