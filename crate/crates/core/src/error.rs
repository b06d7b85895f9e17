use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("capacity exceeded: {what} is {value}, limit {limit}")]
    Capacity {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Initial data lead to a multiple collision (simultaneous events), a
    /// measure-zero set that Monte Carlo callers resample around.
    #[error("pathological trajectory at t = {time}: {detail}")]
    Pathology { time: f64, detail: String },

    #[error("runaway trajectory: more than {limit} collisions")]
    Runaway { limit: usize },

    #[error("importance weights degenerate: effective sample size {ess:.1} of {nominal}")]
    WeightBlowup { ess: f64, nominal: usize },

    #[error("majorant too small: acceptance ratio {ratio:.3} exceeds 1")]
    KernelBound { ratio: f64 },

    #[error("histogram resolution too fine: {empty_fraction:.2} of bins empty")]
    Resolution { empty_fraction: f64 },

    #[error("pathology budget exceeded: {resamples} resamples, budget {budget}")]
    PathologyBudget { resamples: usize, budget: usize },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn is_pathology(&self) -> bool {
        matches!(self, Error::Pathology { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
