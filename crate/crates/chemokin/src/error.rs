//! Error types shared across the solver stack.

use thiserror::Error;

/// Which edge of the internal-state grid box the support ran into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YBoundary {
    Y1Min,
    Y1Max,
    Y2Min,
    Y2Max,
}

impl std::fmt::Display for YBoundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            YBoundary::Y1Min => "y1-min",
            YBoundary::Y1Max => "y1-max",
            YBoundary::Y2Min => "y2-min",
            YBoundary::Y2Max => "y2-max",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ChemoError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("model evaluation failed: {0}")]
    ModelEval(String),

    #[error("signal history does not cover t = {t}: available [{lo}, {hi}]")]
    HistoryGap { t: f64, lo: f64, hi: f64 },

    #[error("phase-space support reached the {boundary} edge of the internal-state box \
             (boundary ring holds {ring_mass:.3e} of total mass {total_mass:.3e}); \
             the a priori state bound is violated")]
    SupportOverflow {
        boundary: YBoundary,
        ring_mass: f64,
        total_mass: f64,
    },

    #[error("thinning bound violated: lambda(y1) = {lambda} exceeds lambda_max = {lambda_max}")]
    ThinningBound { lambda: f64, lambda_max: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ChemoError>;
