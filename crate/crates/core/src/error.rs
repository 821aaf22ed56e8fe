use thiserror::Error;

use crate::sim::Ensemble;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A coefficient or control evaluator produced a non-finite value.
    #[error("non-finite value from `{function}` at (t={t}, x={x}, y={y}, u={u})")]
    Evaluation {
        function: String,
        t: f64,
        x: f64,
        y: f64,
        u: f64,
    },

    /// A Riccati closed form was evaluated past the zero of its denominator.
    ///
    /// `tau_star` is the blow-up time measured backward from the horizon.
    #[error("Riccati blow-up at t={t} (tau*={tau_star:?})")]
    BlowUp { t: f64, tau_star: Option<f64> },

    /// Every particle left the admissible region; the truncated ensemble is kept.
    #[error("all {n_paths} paths blew up by step {step}")]
    EnsembleBlowUp {
        step: usize,
        n_paths: usize,
        ensemble: Box<Ensemble>,
    },

    /// Cost estimation hit a blow-up; statistics over the paths that survived.
    #[error("cost estimate aborted by blow-up at step {step} ({completed} of {n_paths} paths completed)")]
    CostBlowUp {
        step: usize,
        completed: usize,
        n_paths: usize,
        partial_mean_psi: f64,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn is_blow_up(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. } | Error::EnsembleBlowUp { .. } | Error::CostBlowUp { .. }
        )
    }
}
