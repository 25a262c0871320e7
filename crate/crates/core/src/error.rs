use std::fmt;

use crate::regime::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid belief: {0}")]
    InvalidBelief(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid ensemble: {}", DiagnosticList(.0))]
    InvalidEnsemble(Vec<Diagnostic>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "minimality required{}: controllable={controllable}, observable={observable}",
        regime.map(|r| format!(" for regime {r}")).unwrap_or_default()
    )]
    NotMinimal {
        /// 1-based, when known.
        regime: Option<usize>,
        controllable: bool,
        observable: bool,
    },

    #[error(
        "Riccati solver did not converge (residual {residual:e} after {iterations} iterations)"
    )]
    NonConvergence { residual: f64, iterations: usize },

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },

    #[error("{failed} of {paths} paths blew up (limit {limit})")]
    BlowUp {
        failed: usize,
        paths: usize,
        limit: usize,
    },

    #[error("feedback is not uniformly stabilizing (spectral abscissas {abscissas:?})")]
    NotStabilizable { abscissas: Vec<f64> },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::NonFinite { .. }
                | Error::BlowUp { .. }
                | Error::Singular(_)
        )
    }
}

struct DiagnosticList<'a>(&'a [Diagnostic]);

impl fmt::Display for DiagnosticList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, d) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}
