use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {0:?} lies outside the declared domain")]
    OutOfDomain(Vec<f64>),
    #[error("unknown generator index {index} (model has {count} fields)")]
    UnknownIndex { index: usize, count: usize },
    #[error("derivative order exhausted: need {needed}, have {available}")]
    OrderExhausted { needed: usize, available: usize },
    #[error("point {0:?} is not in the smooth set of a Lipschitz model")]
    NonSmoothPoint(Vec<f64>),
    #[error("invalid time interval: t = {t} must exceed s = {s}")]
    BadTime { t: f64, s: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("flow left the box at t = {t}: {x:?}")]
    BoxExit { t: f64, x: Vec<f64> },
    #[error("witness condition fails at y: {0}")]
    Witness(String),
    #[error("series diverging: term norms {0:?}")]
    Divergence(Vec<f64>),
    #[error("infeasible envelope: {0}")]
    Infeasible(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
