//! Exact stochastic simulation of the spatial Muller's ratchet, its truncated
//! approximations, dominating processes, duality toolkit and infection coupling.

// `!(x > 0.0)` is used deliberately so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod duality;
pub mod engine;
pub mod infection;
pub mod model;
pub mod rates;
pub mod rng;
pub mod stats;
pub mod sumtree;

pub use model::{
    dist_s, in_s0, norm_s, psi_p, validate_params, ActiveBox, Configuration, DemeState,
    FitnessSpec, ModelParams, Polynomial, S0Report, TruncationParams, ValidationReport,
};
pub use rng::{seed_stream, SimRng, StreamSeed};
