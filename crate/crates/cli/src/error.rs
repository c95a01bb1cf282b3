use spatial_ratchet::duality::DualityError;
use spatial_ratchet::engine::EngineError;
use spatial_ratchet::infection::InfectionError;
use spatial_ratchet::stats::StatsError;
use spatial_ratchet::ValidationReport;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error(transparent)]
    Validation(ValidationReport),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for usage, parse, validation and i/o errors; 2 for invariant or
    /// guard violations.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invariant(_) => 2,
            _ => 1,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::DominationBroken { .. }
            | EngineError::SnapshotMismatch { .. }
            | EngineError::ReplayInconsistent { .. } => CliError::Invariant(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<InfectionError> for CliError {
    fn from(e: InfectionError) -> Self {
        match e {
            InfectionError::InvariantBroken { .. } | InfectionError::GuardViolation { .. } => {
                CliError::Invariant(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DualityError> for CliError {
    fn from(e: DualityError) -> Self {
        match e {
            DualityError::Engine(inner) => inner.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Engine(inner) => inner.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}
