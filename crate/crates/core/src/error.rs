use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes surfaced by the library.
///
/// [`Error::exit_code`] maps each class onto the command-line exit status.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("system is not parabolic: minimum eigenvalue of the coupling matrix is {min_eig:e}")]
    NonParabolic { min_eig: f64 },

    #[error(
        "explicit scheme unstable: dtau = {dtau:e} exceeds dtau_max = {dtau_max:e}; use n_tau >= {n_tau_min}"
    )]
    Unstable {
        dtau: f64,
        dtau_max: f64,
        n_tau_min: usize,
    },

    #[error("non-finite value in the solution at time step {step}")]
    Blowup { step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no implied volatility: {0}")]
    NoSolution(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error at line {line}: {msg}")]
    Line { line: u64, msg: String },

    #[error("store does not match the requested configuration:\n{0}")]
    StoreMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// 2 configuration, 3 numerical rejection, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::StoreMismatch(_) => 2,
            Error::NonParabolic { .. }
            | Error::Unstable { .. }
            | Error::Blowup { .. }
            | Error::Numerical(_)
            | Error::NoSolution(_) => 3,
            Error::Data(_) | Error::Line { .. } | Error::Io(_) => 4,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
