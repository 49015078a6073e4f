use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// Diagonalization exhausted its sweep budget; the trace is kept for diagnosis.
    #[error("diagonalization did not converge in {sweeps} sweeps (last change {last_change:.3e})")]
    Cycling {
        sweeps: usize,
        last_change: f64,
        trace: Vec<Vec<f64>>,
    },

    #[error("period {period}{}: {source}", drp.as_ref().map(|d| format!(", DRP {d}")).unwrap_or_default())]
    InContext {
        period: usize,
        drp: Option<String>,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn in_period(self, period: usize) -> Self {
        Error::InContext {
            period,
            drp: None,
            source: Box::new(self),
        }
    }

    pub fn in_drp(self, period: usize, drp: &str) -> Self {
        Error::InContext {
            period,
            drp: Some(drp.to_string()),
            source: Box::new(self),
        }
    }

    /// Innermost error with context wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::InContext { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
