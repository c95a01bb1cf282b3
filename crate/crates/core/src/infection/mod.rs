//! Five-class coupling of two realisations of `eta^n` started from
//! different configurations.
//!
//! Class 0 (susceptible) particles are shared by both realisations and kept
//! as per-type counts. Infected (classes 1, 2) and partially recovered
//! (classes 1*, 2*) particles are tracked individually; every 1* particle is
//! paired with a 2* particle at the same deme.

mod cutoff;
mod label;
mod spread;
mod state;

pub use cutoff::{
    compute_u_eps, high_density_guard_check, GuardOutcome, GuardReport, DEFAULT_STEPS_PER_UNIT,
};
pub use label::UlamHarris;
pub use spread::{
    simulate_coupling, spread_csv, CouplingOptions, CouplingSnapshot, CouplingTrajectory,
    SpreadReport, SPREAD_CSV_HEADER,
};
pub use state::{
    coupling_rates, init_coupling, Channel, Class, CouplingEvent, CouplingRates, CouplingState,
    TrackedView, CHANNELS,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InfectionError {
    #[error("coupling invariant broken at t = {time}: {msg}")]
    InvariantBroken { time: f64, msg: String },
    #[error("high-density guard violated at t = {time}, site {site}: {msg}")]
    GuardViolation { time: f64, site: i64, msg: String },
    #[error("event cap of {cap} exceeded before the horizon (t = {time})")]
    HorizonOverflow { cap: u64, time: f64 },
    #[error("no admissible U_eps: {0}")]
    NoSuchU(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}
