// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Errors produced by the sampling, estimation and calibration routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("oracle budget exhausted after {used} of {total} queries")]
    BudgetExhausted { used: usize, total: usize },
    #[error("external oracle failure: {0}")]
    ExternalOracleFailure(String),
    #[error("degenerate window [{lo}, {hi}]")]
    DegenerateWindow { lo: f64, hi: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no admissible split candidate in window")]
    AllCandidatesSkipped,
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("horizon overflow: argmin not certified within {max_events} events per side")]
    HorizonOverflow { max_events: usize },
    #[error("insufficient replicates: {reps} paths give fewer than 10 expected exceedances at probability {prob} (need {needed})")]
    InsufficientReps {
        reps: usize,
        prob: f64,
        needed: usize,
    },
    #[error("missing quantiles: {0}")]
    MissingQuantiles(String),
    #[error("invalid stage count {0}; at least 2 stages required")]
    InvalidStageCount(usize),
    #[error("stage {stage} underflow: {size} samples allocated (need at least {min})")]
    StageUnderflow {
        stage: usize,
        size: usize,
        min: usize,
    },
    #[error("plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by the oracle rather than the caller or the numerics.
    pub fn is_oracle_failure(&self) -> bool {
        matches!(
            self,
            Error::ExternalOracleFailure(_) | Error::BudgetExhausted { .. }
        )
    }

    /// True for errors detected before any sampling or simulation happens.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::InvalidStageCount(_)
                | Error::PlanMismatch(_)
                | Error::InsufficientReps { .. }
                | Error::StageUnderflow { .. }
                | Error::MissingQuantiles(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
