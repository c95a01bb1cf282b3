//! Exact event-driven simulation of the truncated process `eta^n`, the
//! dominating processes `zeta^n`, `zeta^{n,kappa}`, and their coupling.

mod domination;
mod sim;
mod trajectory;

pub use domination::{simulate_domination_pair, DominationPair, DominationRun, JointEvent};
pub use sim::{
    simulate_eta_n, simulate_zeta, zeta_init_from, Dynamics, Simulator, DEFAULT_EVENT_CAP,
};
pub use trajectory::{
    config_at, replay, replay_checked, EventKind, EventRecord, Snapshot, Trajectory,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("event cap of {cap} exceeded before the horizon (t = {time})")]
    HorizonOverflow { cap: u64, time: f64 },
    #[error("q_minus is not non-decreasing on [0, inf); pathwise domination is not constructed")]
    NonMonotoneDeath,
    #[error("domination broken at t = {time}, site {site}: zeta = {zeta}, |eta| = {eta}")]
    DominationBroken {
        time: f64,
        site: i64,
        zeta: u64,
        eta: u64,
    },
    #[error("replay diverged from snapshot {index} at t = {time}")]
    SnapshotMismatch { index: usize, time: f64 },
    #[error("replay inconsistent at event {index}: {msg}")]
    ReplayInconsistent { index: usize, msg: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("trajectory format: {0}")]
    Format(String),
}
