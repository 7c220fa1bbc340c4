use thiserror::Error;

/// Errors raised by the solvers, the dynamics and the diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    /// An input value is outside its admissible range.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    /// A special function was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two measures that must carry equal mass do not.
    #[error("mass mismatch: {0} vs {1}")]
    MassMismatch(f64, f64),

    /// An iterative solve hit its iteration cap.
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e}){context}")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        context: String,
    },

    /// Every coupling weight of one particle underflowed.
    #[error("degenerate coupling row for particle {0}")]
    DegenerateRow(usize),

    /// A solver left its admissible state space.
    #[error("invalid solver state: {0}")]
    InvalidState(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Appends time/step context to a non-convergence error.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        match self {
            Error::NotConverged {
                solver,
                iterations,
                residual,
                mut context,
            } => {
                context.push_str(" [");
                context.push_str(ctx.as_ref());
                context.push(']');
                Error::NotConverged {
                    solver,
                    iterations,
                    residual,
                    context,
                }
            }
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
