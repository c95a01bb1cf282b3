//! Exact simulation of the coupling and spread-of-infection bookkeeping.

use std::fmt::Write as _;

use super::cutoff::{compute_u_eps, high_density_guard_check, DEFAULT_STEPS_PER_UNIT};
use super::state::{Class, CouplingState};
use super::InfectionError;
use crate::model::{Configuration, ModelParams, TruncationParams};
use crate::rng::StreamSeed;
use crate::sumtree::SumTree;

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingOptions {
    /// Threshold parameter for the high-density guard.
    pub eps: f64,
    /// Run the guard check after every event at the touched demes.
    pub guard: bool,
    /// Half-width (physical units) of the window `[-r, r]` watched for hits.
    pub r: f64,
    pub observe: Vec<f64>,
    pub labels: bool,
    /// Check dual balance and co-location after every event.
    pub check_invariants: bool,
    pub event_cap: u64,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        Self {
            eps: 0.1,
            guard: false,
            r: 1.0,
            observe: Vec::new(),
            labels: false,
            check_invariants: true,
            event_cap: crate::engine::DEFAULT_EVENT_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSnapshot {
    pub time: f64,
    pub marginal: [Configuration; 2],
    pub susceptible: Configuration,
    /// Per-class histograms in the order 1, 2, 1*, 2*.
    pub classes: [Configuration; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTrajectory {
    pub initial: [Configuration; 2],
    pub params: ModelParams,
    pub trunc: TruncationParams,
    pub seed: StreamSeed,
    pub horizon: f64,
    pub events: u64,
    pub reinfections: u64,
    pub guard_checks: u64,
    pub snapshots: Vec<CouplingSnapshot>,
    pub final_marginal: [Configuration; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadReport {
    pub hit: bool,
    pub first_hit_time: Option<f64>,
    /// Largest jump count carried by any tracked particle (ancestral jumps included).
    pub max_j: u64,
    /// Number of reinfection events.
    pub total_r: u64,
    pub final_diff_mass: u64,
}

pub const SPREAD_CSV_HEADER: &str =
    "replicate,seed,hit,first_hit_time,max_J,total_R,final_diff_mass";

/// One CSV row per replicate: `(replicate, stream seed, report)`.
pub fn spread_csv(rows: &[(u64, StreamSeed, SpreadReport)]) -> String {
    let mut s = String::new();
    s.push_str(SPREAD_CSV_HEADER);
    s.push('\n');
    for (rep, seed, r) in rows {
        let t = r
            .first_hit_time
            .map_or_else(String::new, |t| format!("{t:.16e}"));
        let _ = writeln!(
            s,
            "{rep},{}:{},{},{t},{},{},{}",
            seed.master, seed.stream, r.hit as u8, r.max_j, r.total_r, r.final_diff_mass
        );
    }
    s
}

fn snapshot(state: &CouplingState, time: f64) -> CouplingSnapshot {
    let mut sus = Configuration::new();
    let mut classes: [Configuration; 4] = Default::default();
    for site in state.active_box().sites() {
        for (k, c) in state.susceptible(site).iter() {
            sus.add(site, k, c);
        }
        for (j, class) in [Class::I1, Class::I2, Class::P1, Class::P2]
            .into_iter()
            .enumerate()
        {
            for (k, c) in state.class_histogram(site, class).iter() {
                classes[j].add(site, k, c);
            }
        }
    }
    CouplingSnapshot {
        time,
        marginal: [state.marginal(1), state.marginal(2)],
        susceptible: sus,
        classes,
    }
}

/// Runs the coupling of `a` and `b` to `horizon`.
pub fn simulate_coupling(
    a: &Configuration,
    b: &Configuration,
    p: &ModelParams,
    t: &TruncationParams,
    horizon: f64,
    opts: &CouplingOptions,
    seed: StreamSeed,
) -> Result<(CouplingTrajectory, SpreadReport), InfectionError> {
    if !(t.lambda_n > 0.0) || !(p.l > 0.0) || p.n == 0 {
        return Err(InfectionError::InvalidInput(
            "lambda_n, L, N must be positive".into(),
        ));
    }
    let u_eps = if opts.guard {
        Some(compute_u_eps(p, opts.eps, DEFAULT_STEPS_PER_UNIT)?)
    } else {
        None
    };
    let mut state = CouplingState::new(a, b, p, t, opts.labels);
    let mut rng = seed.rng();
    let active = state.active_box();
    let mut tree = SumTree::new(active.len());
    for idx in 0..active.len() {
        tree.set(idx, state.rates_at(idx).total);
    }
    let in_window = |site: i64| (site as f64 / p.l).abs() <= opts.r;
    let mut first_hit = state.diff_sites().into_iter().any(in_window).then_some(0.0);
    let mut snapshots = Vec::new();
    let mut obs = opts
        .observe
        .iter()
        .copied()
        .filter(|&x| x <= horizon)
        .peekable();
    let mut events = 0u64;
    let mut guard_checks = 0u64;
    loop {
        let total = tree.total();
        let dt = if total > 0.0 {
            rng.exponential(total)
        } else {
            f64::INFINITY
        };
        let next = state.clock + dt;
        while let Some(t_obs) = obs.next_if(|&x| x < next) {
            snapshots.push(snapshot(&state, t_obs));
        }
        if next > horizon {
            state.clock = horizon;
            break;
        }
        if events >= opts.event_cap {
            return Err(InfectionError::HorizonOverflow {
                cap: opts.event_cap,
                time: state.clock,
            });
        }
        events += 1;
        state.clock = next;
        let idx = tree
            .find(rng.uniform() * total)
            .expect("positive total has an occupied leaf");
        let ev = state.draw_event(idx, &mut rng);
        let touched = state.apply_coupling_event(&ev)?;
        for &i in &touched {
            tree.set(i, state.rates_at(i).total);
            if opts.check_invariants {
                state.check_deme(i)?;
            }
            let site = active.site(i);
            if first_hit.is_none() && in_window(site) && state.deme_differs(i) {
                first_hit = Some(state.clock);
            }
            if let Some(u) = u_eps {
                if high_density_guard_check(&state, site, opts.eps, u)?
                    != super::GuardOutcome::NotApplicable
                {
                    guard_checks += 1;
                }
            }
        }
    }
    let report = SpreadReport {
        hit: first_hit.is_some(),
        first_hit_time: first_hit,
        max_j: state.max_jumps,
        total_r: state.total_reinfections,
        final_diff_mass: state.diff_mass(),
    };
    let traj = CouplingTrajectory {
        initial: [a.clone(), b.clone()],
        params: p.clone(),
        trunc: *t,
        seed,
        horizon,
        events,
        reinfections: state.total_reinfections,
        guard_checks,
        snapshots,
        final_marginal: [state.marginal(1), state.marginal(2)],
    };
    Ok((traj, report))
}
