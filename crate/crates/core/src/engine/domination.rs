//! Joint construction of `(zeta^n, eta^n)` with `zeta(t,x) >= ||eta(t,x)||`.
//!
//! Per deme and per channel the two processes share a joint rate
//! `min(r_eta, r_zeta)` and carry independent remainders. Migration pairs each
//! `eta` particle with a `zeta` partner: a moving `zeta` particle drags an
//! `eta` particle along with probability `||eta(x)|| / zeta(x)`. When
//! `zeta(x) = ||eta(x)||` the `eta`-only birth and death remainders vanish,
//! which is what keeps the order.

use super::trajectory::{EventKind, EventRecord, Trajectory};
use super::EngineError;
use crate::model::{ActiveBox, Configuration, ModelParams, TruncationParams};
use crate::rates::q_scaled;
use crate::rng::{SimRng, StreamSeed};
use crate::sumtree::SumTree;

use super::sim::zeta_init_from;

#[derive(Debug, Clone)]
pub struct DominationRun {
    pub eta: Trajectory,
    pub zeta: Trajectory,
    /// Number of joint-state checks performed (one per event).
    pub checks: u64,
}

#[derive(Debug, Clone, Copy)]
struct PairRates {
    mig_joint: f64,
    mig_zeta: f64,
    birth_eta: f64,
    birth_zeta: f64,
    death_eta: f64,
    death_zeta: f64,
    open_left: bool,
    open_right: bool,
    q_plus_eta: f64,
}

impl PairRates {
    fn total(&self) -> f64 {
        self.mig_joint
            + self.mig_zeta
            + self.birth_eta.max(self.birth_zeta)
            + self.death_eta.max(self.death_zeta)
    }
}

/// The `eta` and `zeta` records of one joint event.
pub type JointEvent = (Option<EventRecord>, Option<EventRecord>);

/// Shared state of the pair.
#[derive(Debug, Clone)]
pub struct DominationPair {
    params: ModelParams,
    trunc: TruncationParams,
    active: ActiveBox,
    fitness: Vec<f64>,
    eta: Vec<Vec<u64>>,
    eta_tot: Vec<u64>,
    zeta: Vec<u64>,
    tree: SumTree,
    exterior_eta: Configuration,
    exterior_zeta: Configuration,
    init_eta: Configuration,
    init_zeta: Configuration,
    clock: f64,
    rng: SimRng,
    seed: StreamSeed,
    events: u64,
    pub event_cap: u64,
}

enum Side {
    Both,
    Eta,
    Zeta,
}

impl DominationPair {
    pub fn new(
        init: &Configuration,
        p: &ModelParams,
        t: &TruncationParams,
        seed: StreamSeed,
    ) -> Result<Self, EngineError> {
        if !p.q_minus.derivative().is_nonnegative_on_halfline() {
            return Err(EngineError::NonMonotoneDeath);
        }
        if !(t.lambda_n > 0.0) || !(p.l > 0.0) || p.n == 0 {
            return Err(EngineError::InvalidInput(
                "lambda_n, L, N must be positive".into(),
            ));
        }
        let active = t.active_box(p.l);
        let kmax = init.max_type().unwrap_or(0).max(t.k_n);
        let mut eta = vec![vec![0u64; kmax as usize + 1]; active.len()];
        let mut eta_tot = vec![0u64; active.len()];
        let mut exterior_eta = Configuration::new();
        for (i, d) in init.iter() {
            if active.contains(i) {
                let idx = active.index(i);
                for (k, c) in d.iter() {
                    eta[idx][k as usize] += c;
                    eta_tot[idx] += c;
                }
            } else {
                exterior_eta.set_deme(i, d.clone());
            }
        }
        let init_zeta = zeta_init_from(init);
        let exterior_zeta = zeta_init_from(&exterior_eta);
        let mut pair = Self {
            params: p.clone(),
            trunc: *t,
            active,
            fitness: p.fitness.table(kmax + 1),
            zeta: eta_tot.clone(),
            eta,
            eta_tot,
            tree: SumTree::new(active.len()),
            exterior_eta,
            exterior_zeta,
            init_eta: init.clone(),
            init_zeta,
            clock: 0.0,
            rng: seed.rng(),
            seed,
            events: 0,
            event_cap: super::DEFAULT_EVENT_CAP,
        };
        for idx in 0..active.len() {
            pair.refresh(idx);
        }
        Ok(pair)
    }

    fn eta_birth_weight(&self, row: &[u64], kk: usize) -> (f64, f64) {
        let mu = self.params.mu;
        let clean = row
            .get(kk)
            .map_or(0.0, |&c| self.fitness[kk] * (1.0 - mu) * c as f64);
        let mutated = if kk >= 1 {
            row.get(kk - 1)
                .map_or(0.0, |&c| self.fitness[kk - 1] * mu * c as f64)
        } else {
            0.0
        };
        (clean, mutated)
    }

    fn rates(&self, idx: usize) -> PairRates {
        let site = self.active.site(idx);
        let open_left = self.active.contains(site - 1);
        let open_right = self.active.contains(site + 1);
        let dirs = open_left as u32 + open_right as u32;
        let n = self.eta_tot[idx];
        let z = self.zeta[idx];
        let half = 0.5 * self.params.m * dirs as f64;
        let (qp_n, qm_n) = if n > 0 {
            (
                q_scaled(&self.params.q_plus, self.params.n, n as f64),
                q_scaled(&self.params.q_minus, self.params.n, n as f64),
            )
        } else {
            (0.0, 0.0)
        };
        let (qp_z, qm_z) = if z > 0 {
            (
                q_scaled(&self.params.q_plus, self.params.n, z as f64),
                q_scaled(&self.params.q_minus, self.params.n, z as f64),
            )
        } else {
            (0.0, 0.0)
        };
        let row = &self.eta[idx];
        let top = (self.trunc.k_n as usize).min(row.len() - 1);
        let mut w = 0.0;
        for kk in 0..=top {
            let (c, m) = self.eta_birth_weight(row, kk);
            w += c + m;
        }
        let mut birth_eta = w * qp_n;
        let birth_zeta = z as f64 * qp_z;
        if n == z {
            // s_k <= 1 bounds the eta rate by the zeta rate; drop rounding excess
            birth_eta = birth_eta.min(birth_zeta);
        }
        PairRates {
            mig_joint: half * n as f64,
            mig_zeta: half * (z - n) as f64,
            birth_eta,
            birth_zeta,
            death_eta: n as f64 * qm_n,
            death_zeta: z as f64 * qm_z,
            open_left,
            open_right,
            q_plus_eta: qp_n,
        }
    }

    fn refresh(&mut self, idx: usize) {
        let r = self.rates(idx).total();
        self.tree.set(idx, r);
    }

    fn pick_eta_type(&mut self, idx: usize) -> u32 {
        let target = self.rng.below(self.eta_tot[idx]);
        let mut acc = 0;
        for (k, &c) in self.eta[idx].iter().enumerate() {
            acc += c;
            if target < acc {
                return k as u32;
            }
        }
        unreachable!("eta occupancy cache out of sync")
    }

    fn pick_eta_birth(&mut self, idx: usize, q_plus: f64, birth_eta: f64) -> EventKind {
        let row = self.eta[idx].clone();
        let top = (self.trunc.k_n as usize).min(row.len() - 1);
        let mut target = self.rng.uniform() * birth_eta / q_plus;
        let mut chosen = None;
        for kk in 0..=top {
            let (c, m) = self.eta_birth_weight(&row, kk);
            if c + m <= 0.0 {
                continue;
            }
            chosen = Some((kk, c, m));
            if target < c + m {
                break;
            }
            target -= c + m;
        }
        let (kk, c, m) = chosen.expect("eta birth channel with positive rate");
        let mutated = self.rng.uniform() * (c + m) < m;
        EventKind::Birth {
            offspring: kk as u32,
            mutated,
        }
    }

    /// Advances one joint event; returns the `eta` and `zeta` records it
    /// produced (either may be absent).
    pub fn step(&mut self, horizon: f64) -> Result<Option<JointEvent>, EngineError> {
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
            .expect("occupied leaf");
        let site = self.active.site(idx);
        let r = self.rates(idx);
        let mut v = self.rng.uniform() * r.total();
        let mig = r.mig_joint + r.mig_zeta;
        let birth = r.birth_eta.max(r.birth_zeta);
        let (eta_kind, zeta_kind) =
            if v < mig || (birth == 0.0 && r.death_eta.max(r.death_zeta) == 0.0) {
                let left = if r.open_left && r.open_right {
                    self.rng.bernoulli(0.5)
                } else {
                    r.open_left
                };
                let joint = v < r.mig_joint;
                let k = if joint {
                    Some(self.pick_eta_type(idx))
                } else {
                    None
                };
                let mk = |k: u32| {
                    if left {
                        EventKind::MigrateLeft { k }
                    } else {
                        EventKind::MigrateRight { k }
                    }
                };
                (k.map(mk), Some(mk(0)))
            } else {
                v -= mig;
                let (side, is_birth) = if v < birth {
                    let joint = r.birth_eta.min(r.birth_zeta);
                    let side = if v < joint {
                        Side::Both
                    } else if r.birth_eta > r.birth_zeta {
                        Side::Eta
                    } else {
                        Side::Zeta
                    };
                    (side, true)
                } else {
                    let v = v - birth;
                    let joint = r.death_eta.min(r.death_zeta);
                    let side = if v < joint {
                        Side::Both
                    } else if r.death_eta > r.death_zeta {
                        Side::Eta
                    } else {
                        Side::Zeta
                    };
                    (side, false)
                };
                let eta_part = matches!(side, Side::Both | Side::Eta);
                let zeta_part = matches!(side, Side::Both | Side::Zeta);
                let eta_kind = if !eta_part {
                    None
                } else if is_birth {
                    Some(self.pick_eta_birth(idx, r.q_plus_eta, r.birth_eta))
                } else {
                    Some(EventKind::Death {
                        k: self.pick_eta_type(idx),
                    })
                };
                let zeta_kind = zeta_part.then_some(if is_birth {
                    EventKind::Birth {
                        offspring: 0,
                        mutated: false,
                    }
                } else {
                    EventKind::Death { k: 0 }
                });
                (eta_kind, zeta_kind)
            };
        let time = self.clock;
        let mut touched = vec![idx];
        let eta_rec = eta_kind.map(|kind| {
            let (rec, t) = self.apply_eta(idx, site, kind, time);
            touched.extend(t);
            rec
        });
        let zeta_rec = zeta_kind.map(|kind| {
            let (rec, t) = self.apply_zeta(idx, site, kind, time);
            touched.extend(t);
            rec
        });
        for &i in &touched {
            if self.zeta[i] < self.eta_tot[i] {
                return Err(EngineError::DominationBroken {
                    time,
                    site: self.active.site(i),
                    zeta: self.zeta[i],
                    eta: self.eta_tot[i],
                });
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for i in touched {
            self.refresh(i);
        }
        Ok(Some((eta_rec, zeta_rec)))
    }

    fn apply_eta(
        &mut self,
        idx: usize,
        site: i64,
        kind: EventKind,
        time: f64,
    ) -> (EventRecord, Option<usize>) {
        let mut rec = EventRecord {
            time,
            site,
            kind,
            deme_total: 0,
            target_total: None,
        };
        let mut other = None;
        match kind {
            EventKind::MigrateLeft { k } | EventKind::MigrateRight { k } => {
                let t = self.active.index(rec.target_site().expect("target"));
                self.eta[idx][k as usize] -= 1;
                self.eta_tot[idx] -= 1;
                self.eta[t][k as usize] += 1;
                self.eta_tot[t] += 1;
                rec.target_total = Some(self.eta_tot[t]);
                other = Some(t);
            }
            EventKind::Birth { offspring, .. } => {
                self.eta[idx][offspring as usize] += 1;
                self.eta_tot[idx] += 1;
            }
            EventKind::Death { k } => {
                self.eta[idx][k as usize] -= 1;
                self.eta_tot[idx] -= 1;
            }
        }
        rec.deme_total = self.eta_tot[idx];
        (rec, other)
    }

    fn apply_zeta(
        &mut self,
        idx: usize,
        site: i64,
        kind: EventKind,
        time: f64,
    ) -> (EventRecord, Option<usize>) {
        let mut rec = EventRecord {
            time,
            site,
            kind,
            deme_total: 0,
            target_total: None,
        };
        let mut other = None;
        match kind {
            EventKind::MigrateLeft { .. } | EventKind::MigrateRight { .. } => {
                let t = self.active.index(rec.target_site().expect("target"));
                self.zeta[idx] -= 1;
                self.zeta[t] += 1;
                rec.target_total = Some(self.zeta[t]);
                other = Some(t);
            }
            EventKind::Birth { .. } => self.zeta[idx] += 1,
            EventKind::Death { .. } => self.zeta[idx] -= 1,
        }
        rec.deme_total = self.zeta[idx];
        (rec, other)
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// True iff `zeta >= ||eta||` at every in-box site.
    pub fn dominates(&self) -> bool {
        self.zeta.iter().zip(&self.eta_tot).all(|(z, n)| z >= n)
    }

    pub fn eta_config(&self) -> Configuration {
        let mut c = self.exterior_eta.clone();
        for (idx, row) in self.eta.iter().enumerate() {
            for (k, &n) in row.iter().enumerate() {
                c.add(self.active.site(idx), k as u32, n);
            }
        }
        c
    }

    pub fn zeta_config(&self) -> Configuration {
        let mut c = self.exterior_zeta.clone();
        for (idx, &z) in self.zeta.iter().enumerate() {
            c.add(self.active.site(idx), 0, z);
        }
        c
    }

    pub fn run(mut self, horizon: f64) -> Result<DominationRun, EngineError> {
        let mut eta_events = Vec::new();
        let mut zeta_events = Vec::new();
        let mut checks = 0;
        while let Some((e, z)) = self.step(horizon)? {
            checks += 1;
            eta_events.extend(e);
            zeta_events.extend(z);
        }
        let mk = |initial: Configuration, events, final_config| Trajectory {
            initial,
            params: self.params.clone(),
            trunc: self.trunc,
            seed: self.seed,
            horizon,
            events,
            snapshots: Vec::new(),
            final_config,
        };
        Ok(DominationRun {
            eta: mk(self.init_eta.clone(), eta_events, self.eta_config()),
            zeta: mk(self.init_zeta.clone(), zeta_events, self.zeta_config()),
            checks,
        })
    }
}

/// Runs the coupled pair to `horizon`, checking `zeta >= ||eta||` after
/// every event.
pub fn simulate_domination_pair(
    init: &Configuration,
    p: &ModelParams,
    t: &TruncationParams,
    horizon: f64,
    seed: StreamSeed,
) -> Result<DominationRun, EngineError> {
    DominationPair::new(init, p, t, seed)?.run(horizon)
}
