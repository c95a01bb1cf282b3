use super::trajectory::{EventKind, EventRecord, Snapshot, Trajectory};
use super::EngineError;
use crate::model::{ActiveBox, Configuration, DemeState, ModelParams, TruncationParams};
use crate::rates::q_scaled;
use crate::rng::{SimRng, StreamSeed};
use crate::sumtree::SumTree;

pub const DEFAULT_EVENT_CAP: u64 = 10_000_000;

/// Which process a [`Simulator`] realises.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dynamics {
    /// The truncated spatial ratchet `eta^n`.
    Eta,
    /// The mutation-free dominating process; births vanish at demes whose
    /// occupancy exceeds `N * kappa` when a cutoff is given.
    Zeta { kappa: Option<u64> },
}

/// One exact trajectory of `eta^n` or `zeta^{n(,kappa)}` on the active box.
///
/// Sites outside the box are held in `exterior` and never touched. Every
/// in-box deme has a cached total rate in a sum tree; the cache is written
/// only through [`Simulator::deme_rate`], so recomputation is bit-identical.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: ModelParams,
    trunc: TruncationParams,
    dynamics: Dynamics,
    active: ActiveBox,
    fitness: Vec<f64>,
    mu: f64,
    birth_cap: Option<u64>,
    counts: Vec<Vec<u64>>,
    totals: Vec<u64>,
    tree: SumTree,
    exterior: Configuration,
    initial: Configuration,
    clock: f64,
    rng: SimRng,
    seed: StreamSeed,
    events: u64,
    pub event_cap: u64,
}

/// Rate components of one deme.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DemeRates {
    left: f64,
    right: f64,
    births: f64,
    deaths: f64,
    q_plus: f64,
    q_minus: f64,
}

impl DemeRates {
    fn total(&self) -> f64 {
        self.left + self.right + self.births + self.deaths
    }
}

/// `zeta(0, x) = ||eta(x)||`: all particles collapsed to type 0.
pub fn zeta_init_from(eta: &Configuration) -> Configuration {
    let mut z = Configuration::new();
    for (i, d) in eta.iter() {
        z.add(i, 0, d.total());
    }
    z
}

impl Simulator {
    pub fn new(
        init: &Configuration,
        params: &ModelParams,
        trunc: &TruncationParams,
        dynamics: Dynamics,
        seed: StreamSeed,
    ) -> Result<Self, EngineError> {
        if !(trunc.lambda_n > 0.0) {
            return Err(EngineError::InvalidInput(
                "lambda_n must be positive".into(),
            ));
        }
        if !(params.l > 0.0) || params.n == 0 || !(params.m >= 0.0) {
            return Err(EngineError::InvalidInput(
                "L, N must be positive and m non-negative".into(),
            ));
        }
        let active = trunc.active_box(params.l);
        let init = match dynamics {
            Dynamics::Eta => init.clone(),
            Dynamics::Zeta { .. } => zeta_init_from(init),
        };
        let max_init = init.max_type().unwrap_or(0);
        let (fitness, mu, kmax) = match dynamics {
            Dynamics::Eta => {
                let kmax = max_init.max(trunc.k_n);
                (params.fitness.table(kmax + 1), params.mu, kmax)
            }
            Dynamics::Zeta { .. } => (vec![1.0, 1.0], 0.0, 0),
        };
        let birth_cap = match dynamics {
            Dynamics::Zeta { kappa: Some(k) } => Some(params.n.saturating_mul(k)),
            _ => None,
        };
        let mut counts = vec![vec![0u64; kmax as usize + 1]; active.len()];
        let mut totals = vec![0u64; active.len()];
        let mut exterior = Configuration::new();
        for (i, d) in init.iter() {
            if active.contains(i) {
                let idx = active.index(i);
                for (k, c) in d.iter() {
                    counts[idx][k as usize] += c;
                    totals[idx] += c;
                }
            } else {
                exterior.set_deme(i, d.clone());
            }
        }
        let mut sim = Self {
            params: params.clone(),
            trunc: *trunc,
            dynamics,
            active,
            fitness,
            mu,
            birth_cap,
            counts,
            totals,
            tree: SumTree::new(active.len()),
            exterior,
            initial: init,
            clock: 0.0,
            rng: seed.rng(),
            seed,
            events: 0,
            event_cap: DEFAULT_EVENT_CAP,
        };
        for idx in 0..active.len() {
            sim.refresh(idx);
        }
        Ok(sim)
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn active_box(&self) -> ActiveBox {
        self.active
    }

    pub fn dynamics(&self) -> Dynamics {
        self.dynamics
    }

    pub fn events_processed(&self) -> u64 {
        self.events
    }

    pub fn total_rate(&self) -> f64 {
        self.tree.total()
    }

    /// Occupancy at `site` (exterior sites included).
    pub fn total_at(&self, site: i64) -> u64 {
        if self.active.contains(site) {
            self.totals[self.active.index(site)]
        } else {
            self.exterior.total_at(site)
        }
    }

    pub fn count(&self, site: i64, k: u32) -> u64 {
        if self.active.contains(site) {
            self.counts[self.active.index(site)]
                .get(k as usize)
                .copied()
                .unwrap_or(0)
        } else {
            self.exterior.get(site, k)
        }
    }

    pub fn exterior(&self) -> &Configuration {
        &self.exterior
    }

    pub fn config(&self) -> Configuration {
        let mut c = self.exterior.clone();
        for (idx, row) in self.counts.iter().enumerate() {
            let site = self.active.site(idx);
            for (k, &n) in row.iter().enumerate() {
                c.add(site, k as u32, n);
            }
        }
        c
    }

    pub fn deme_state(&self, site: i64) -> DemeState {
        if self.active.contains(site) {
            let row = &self.counts[self.active.index(site)];
            DemeState::from_counts(row.iter().enumerate().map(|(k, &c)| (k as u32, c)))
        } else {
            self.exterior.deme(site).cloned().unwrap_or_default()
        }
    }

    fn birth_weight(&self, row: &[u64], kk: usize) -> (f64, f64) {
        let clean = row
            .get(kk)
            .map_or(0.0, |&c| self.fitness[kk] * (1.0 - self.mu) * c as f64);
        let mutated = if kk >= 1 {
            row.get(kk - 1)
                .map_or(0.0, |&c| self.fitness[kk - 1] * self.mu * c as f64)
        } else {
            0.0
        };
        (clean, mutated)
    }

    fn deme_rate(&self, idx: usize) -> DemeRates {
        let n = self.totals[idx];
        let site = self.active.site(idx);
        let half = 0.5 * self.params.m * n as f64;
        let left = if self.active.contains(site - 1) {
            half
        } else {
            0.0
        };
        let right = if self.active.contains(site + 1) {
            half
        } else {
            0.0
        };
        if n == 0 {
            return DemeRates {
                left,
                right,
                births: 0.0,
                deaths: 0.0,
                q_plus: 0.0,
                q_minus: 0.0,
            };
        }
        let u = n as f64;
        let q_plus = if self.birth_cap.is_some_and(|cap| n > cap) {
            0.0
        } else {
            q_scaled(&self.params.q_plus, self.params.n, u)
        };
        let q_minus = q_scaled(&self.params.q_minus, self.params.n, u);
        let row = &self.counts[idx];
        let top = (self.trunc.k_n as usize).min(row.len());
        let mut weight = 0.0;
        for kk in 0..=top {
            let (c, m) = self.birth_weight(row, kk);
            weight += c + m;
        }
        DemeRates {
            left,
            right,
            births: weight * q_plus,
            deaths: u * q_minus,
            q_plus,
            q_minus,
        }
    }

    fn refresh(&mut self, idx: usize) {
        let r = self.deme_rate(idx).total();
        self.tree.set(idx, r);
    }

    /// True iff every cached deme rate equals a from-scratch recomputation.
    pub fn cache_coherent(&self) -> bool {
        (0..self.active.len()).all(|idx| self.tree.get(idx) == self.deme_rate(idx).total())
            && self.tree.total() == self.tree.recomputed_total()
    }

    fn pick_type(&mut self, idx: usize) -> u32 {
        let target = self.rng.below(self.totals[idx]);
        let mut acc = 0;
        for (k, &c) in self.counts[idx].iter().enumerate() {
            acc += c;
            if target < acc {
                return k as u32;
            }
        }
        unreachable!("occupancy cache out of sync")
    }

    /// Advances to the next event if it occurs no later than `horizon`;
    /// otherwise moves the clock to `horizon` and returns `None`.
    pub fn step(&mut self, horizon: f64) -> Result<Option<EventRecord>, EngineError> {
        let total = self.tree.total();
        if total <= 0.0 {
            self.clock = self.clock.max(horizon);
            return Ok(None);
        }
        let dt = self.rng.exponential(total);
        if self.clock + dt > horizon {
            self.clock = horizon;
            return Ok(None);
        }
        if self.events >= self.event_cap {
            return Err(EngineError::HorizonOverflow {
                cap: self.event_cap,
                time: self.clock,
            });
        }
        self.clock += dt;
        self.events += 1;
        let idx = self
            .tree
            .find(self.rng.uniform() * total)
            .expect("positive total has an occupied leaf");
        let site = self.active.site(idx);
        let rates = self.deme_rate(idx);
        let v = self.rng.uniform() * rates.total();
        let mig = rates.left + rates.right;
        let channel = if v < mig {
            0
        } else if rates.births > 0.0 && (v - mig < rates.births || rates.deaths == 0.0) {
            1
        } else if rates.deaths > 0.0 {
            2
        } else {
            0
        };
        let kind = match channel {
            0 => {
                let k = self.pick_type(idx);
                if v < rates.left || rates.right == 0.0 {
                    EventKind::MigrateLeft { k }
                } else {
                    EventKind::MigrateRight { k }
                }
            }
            1 => {
                let row = &self.counts[idx];
                let top = (self.trunc.k_n as usize).min(row.len());
                let mut target = (v - mig) / rates.q_plus;
                let mut chosen = None;
                for kk in 0..=top {
                    let (c, m) = self.birth_weight(row, kk);
                    if c + m <= 0.0 {
                        continue;
                    }
                    chosen = Some((kk, c, m));
                    if target < c + m {
                        break;
                    }
                    target -= c + m;
                }
                let (kk, c, m) = chosen.expect("birth channel with positive rate");
                let mutated = self.rng.uniform() * (c + m) < m;
                EventKind::Birth {
                    offspring: kk as u32,
                    mutated,
                }
            }
            _ => EventKind::Death {
                k: self.pick_type(idx),
            },
        };
        let mut record = EventRecord {
            time: self.clock,
            site,
            kind,
            deme_total: 0,
            target_total: None,
        };
        match kind {
            EventKind::MigrateLeft { k } | EventKind::MigrateRight { k } => {
                let to = record.target_site().expect("migration target");
                let tidx = self.active.index(to);
                self.counts[idx][k as usize] -= 1;
                self.totals[idx] -= 1;
                self.counts[tidx][k as usize] += 1;
                self.totals[tidx] += 1;
                self.refresh(tidx);
                record.target_total = Some(self.totals[tidx]);
            }
            EventKind::Birth { offspring, .. } => {
                self.counts[idx][offspring as usize] += 1;
                self.totals[idx] += 1;
            }
            EventKind::Death { k } => {
                self.counts[idx][k as usize] -= 1;
                self.totals[idx] -= 1;
            }
        }
        self.refresh(idx);
        record.deme_total = self.totals[idx];
        Ok(Some(record))
    }

    /// Runs to `horizon`, recording every event and a snapshot at each
    /// observation time (sorted ascending, within `[0, horizon]`).
    pub fn run(mut self, horizon: f64, observe: &[f64]) -> Result<Trajectory, EngineError> {
        let mut events = Vec::new();
        let mut snapshots = Vec::new();
        let mut obs = observe.iter().copied().filter(|&t| t <= horizon).peekable();
        loop {
            let next = obs.peek().copied().unwrap_or(horizon);
            match self.step(next)? {
                Some(ev) => events.push(ev),
                None => {
                    if obs.next().is_some() {
                        snapshots.push(Snapshot {
                            time: next,
                            config: self.config(),
                        });
                    } else {
                        break;
                    }
                }
            }
        }
        Ok(self.into_trajectory(horizon, events, snapshots))
    }

    fn into_trajectory(
        self,
        horizon: f64,
        events: Vec<EventRecord>,
        snapshots: Vec<Snapshot>,
    ) -> Trajectory {
        Trajectory {
            final_config: self.config(),
            initial: self.initial,
            params: self.params,
            trunc: self.trunc,
            seed: self.seed,
            horizon,
            events,
            snapshots,
        }
    }
}

/// Exact sample path of `eta^n` from `init` up to `horizon`.
pub fn simulate_eta_n(
    init: &Configuration,
    p: &ModelParams,
    t: &TruncationParams,
    horizon: f64,
    seed: StreamSeed,
) -> Result<Trajectory, EngineError> {
    Simulator::new(init, p, t, Dynamics::Eta, seed)?.run(horizon, &[])
}

/// Exact sample path of `zeta^n` (or `zeta^{n,kappa}`); `init` may carry
/// types, which are collapsed to per-deme totals.
pub fn simulate_zeta(
    init: &Configuration,
    p: &ModelParams,
    t: &TruncationParams,
    horizon: f64,
    seed: StreamSeed,
    kappa: Option<u64>,
) -> Result<Trajectory, EngineError> {
    Simulator::new(init, p, t, Dynamics::Zeta { kappa }, seed)?.run(horizon, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_stream;

    fn kpp() -> ModelParams {
        ModelParams::fisher_kpp(1.0, 1.0, 2, 0.3, 0.2)
    }

    #[test]
    fn empty_init_has_no_events() {
        let t = simulate_eta_n(
            &Configuration::new(),
            &kpp(),
            &TruncationParams::new(3.0, 2),
            5.0,
            seed_stream(1, 0),
        )
        .unwrap();
        assert!(t.events.is_empty());
        assert_eq!(t.final_config, Configuration::new());
    }

    #[test]
    fn cache_stays_coherent_and_cutoff_holds() {
        let p = kpp();
        let trunc = TruncationParams::new(2.0, 2);
        let mut init = Configuration::uniform(2, 3);
        init.add(1, 5, 2);
        let mut sim = Simulator::new(&init, &p, &trunc, Dynamics::Eta, seed_stream(7, 3)).unwrap();
        let exterior = sim.exterior().clone();
        while let Some(ev) = sim.step(3.0).unwrap() {
            assert!(sim.cache_coherent());
            if let EventKind::Birth { offspring, .. } = ev.kind {
                assert!(offspring <= 2);
            }
            assert!(ev.site.abs() <= 2);
        }
        assert_eq!(sim.exterior(), &exterior);
    }

    #[test]
    fn kappa_cutoff_zeroes_births() {
        let p = ModelParams::fisher_kpp(1.0, 0.0, 2, 0.0, 0.5);
        let mut init = Configuration::new();
        init.add(0, 0, 7);
        let sim = Simulator::new(
            &init,
            &p,
            &TruncationParams::new(0.5, 0),
            Dynamics::Zeta { kappa: Some(3) },
            seed_stream(0, 0),
        )
        .unwrap();
        let r = sim.deme_rate(0);
        assert_eq!(r.births, 0.0);
        assert!(r.deaths > 0.0);
        let sim = Simulator::new(
            &init,
            &p,
            &TruncationParams::new(0.5, 0),
            Dynamics::Zeta { kappa: Some(4) },
            seed_stream(0, 0),
        )
        .unwrap();
        assert!(sim.deme_rate(0).births > 0.0);
    }

    #[test]
    fn zeta_init_collapses_types() {
        let mut eta = Configuration::new();
        eta.add(0, 0, 1);
        eta.add(0, 3, 2);
        let z = zeta_init_from(&eta);
        assert_eq!(z.get(0, 0), 3);
    }

    #[test]
    fn observation_snapshots_replay() {
        let p = kpp();
        let init = Configuration::uniform(3, 2);
        let sim = Simulator::new(
            &init,
            &p,
            &TruncationParams::new(3.0, 3),
            Dynamics::Eta,
            seed_stream(5, 5),
        )
        .unwrap();
        let traj = sim.run(1.0, &[0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(traj.snapshots.len(), 4);
        assert_eq!(traj.snapshots[0].config, init);
        assert_eq!(super::super::replay(&traj).unwrap(), traj.final_config);
    }
}
