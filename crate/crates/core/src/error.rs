use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("step budget of {max_steps} exhausted at t = {t}")]
    MaxSteps { max_steps: usize, t: f64 },

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("t = {t} lies outside the trajectory range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    /// An input lies outside the domain on which a closed form is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A symmetry term is singular at the given phase.
    #[error("singularity in {what} at phase {phi}")]
    Singularity { what: &'static str, phi: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at theta = ({theta1}, {theta2})")]
    NonFiniteLoss { theta1: f64, theta2: f64 },

    #[error("dataset contains no experiments")]
    EmptyDataset,

    #[error("regularizer {0} has no admissible evaluation points")]
    DegenerateRegularizer(&'static str),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Integration { .. }
                | Error::MaxSteps { .. }
                | Error::StepUnderflow { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Singularity { .. }
                | Error::DegenerateRegularizer(_)
        )
    }
}
