use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("distribution truncated at n_max={n_max} loses {lost_mass:.3e} mass; need n_max >= {required}")]
    Truncation {
        n_max: usize,
        required: usize,
        lost_mass: f64,
    },

    #[error("state n={n} is infeasible: overload mass {mass:.3e} at zero rate exceeds budget {budget:.3e}")]
    Infeasible { n: usize, mass: f64, budget: f64 },

    #[error("root solve for state n={n} failed: {reason}")]
    SolverFailed { n: usize, reason: String },

    #[error("rate table is not monotone nonincreasing at n={n}")]
    NonMonotone { n: usize },

    #[error("rate table is not convex at n={n} (second difference {second_difference:.3e})")]
    NonConvex { n: usize, second_difference: f64 },

    #[error("power iteration did not converge in {iterations} iterations (last TV gap {last_gap:.3e})")]
    NoConvergence { iterations: usize, last_gap: f64 },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for errors caused by invalid inputs rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::NonMonotone { .. })
    }
}
