use super::label::UlamHarris;
use super::InfectionError;
use crate::model::{ActiveBox, Configuration, DemeState, ModelParams, TruncationParams};
use crate::rates::q_scaled;
use crate::rng::SimRng;

/// Tracked particle classes. `P1`/`P2` are the partially recovered 1*, 2*.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    I1,
    I2,
    P1,
    P2,
}

impl Class {
    pub fn infected(i: u8) -> Class {
        if i == 1 {
            Class::I1
        } else {
            Class::I2
        }
    }

    pub fn partial(i: u8) -> Class {
        if i == 1 {
            Class::P1
        } else {
            Class::P2
        }
    }

    /// Which realisation (1 or 2) the class belongs to.
    pub fn side(self) -> u8 {
        match self {
            Class::I1 | Class::P1 => 1,
            Class::I2 | Class::P2 => 2,
        }
    }

    pub fn is_partial(self) -> bool {
        matches!(self, Class::P1 | Class::P2)
    }

    fn idx(self) -> usize {
        self as usize
    }
}

/// Event channels of one deme; totals are summed over all particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    MigrateSusceptible,
    MigrateInfected(u8),
    MigratePair,
    BirthInfected(u8),
    BirthPartial(u8),
    BirthMin,
    Induce(u8, u8),
    DeathInfected(u8),
    DeathMin,
    Transmit(u8, u8),
    DeathPair,
    Partial(u8, u8),
}

pub const CHANNELS: [Channel; 25] = [
    Channel::MigrateSusceptible,
    Channel::MigrateInfected(1),
    Channel::MigrateInfected(2),
    Channel::MigratePair,
    Channel::BirthInfected(1),
    Channel::BirthInfected(2),
    Channel::BirthPartial(1),
    Channel::BirthPartial(2),
    Channel::BirthMin,
    Channel::Induce(1, 1),
    Channel::Induce(1, 2),
    Channel::Induce(2, 1),
    Channel::Induce(2, 2),
    Channel::DeathInfected(1),
    Channel::DeathInfected(2),
    Channel::DeathMin,
    Channel::Transmit(1, 1),
    Channel::Transmit(1, 2),
    Channel::Transmit(2, 1),
    Channel::Transmit(2, 2),
    Channel::DeathPair,
    Channel::Partial(1, 1),
    Channel::Partial(1, 2),
    Channel::Partial(2, 1),
    Channel::Partial(2, 2),
];

/// Per-particle rates at one deme together with channel totals.
///
/// `beta_infected[i]` and `beta_min` omit the factor `1{k <= K_n} s_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingRates {
    pub n: [u64; 2],
    pub counts: [u64; 4],
    pub susceptible: u64,
    pub beta_infected: [f64; 2],
    pub beta_min: f64,
    pub beta_induce: [[f64; 2]; 2],
    pub delta_infected: [f64; 2],
    pub delta_min: f64,
    pub delta_transmit: [[f64; 2]; 2],
    pub delta_partial: [[f64; 2]; 2],
    pub totals: [f64; 25],
    pub total: f64,
}

/// A fully resolved coupling event.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingEvent {
    MigrateSusceptible {
        site: i64,
        k: u32,
        to: i64,
    },
    MigrateInfected {
        particle: usize,
        to: i64,
    },
    MigratePair {
        particle: usize,
        to: i64,
    },
    /// `offspring = None`: the mutated offspring exceeded `K_n` and was deleted.
    BirthTracked {
        parent: usize,
        offspring: Option<u32>,
    },
    BirthSusceptible {
        site: i64,
        offspring: Option<u32>,
    },
    Induce {
        inducer: usize,
        class: u8,
        offspring: Option<u32>,
    },
    DeathInfected {
        particle: usize,
    },
    DeathSusceptible {
        site: i64,
        k: u32,
    },
    Transmit {
        transmitter: usize,
        i2: u8,
        k: u32,
    },
    DeathPair {
        particle: usize,
    },
    Partial {
        particle: usize,
        i1: u8,
        replacement: Option<usize>,
    },
}

impl CouplingEvent {
    pub fn is_reinfection(&self) -> bool {
        matches!(
            self,
            CouplingEvent::Partial {
                replacement: None,
                ..
            }
        )
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Particle {
    pub class: Class,
    pub deme: usize,
    pub k: u32,
    pub dual: Option<usize>,
    slot: usize,
    pub label: Option<UlamHarris>,
    pub generated: u32,
    pub jumps: u64,
    pub r_inherited: u64,
    pub reinfections: u64,
    alive: bool,
}

/// Read-only view of one tracked particle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedView {
    pub id: usize,
    pub class: Class,
    pub site: i64,
    pub k: u32,
    pub dual: Option<usize>,
    pub label: Option<UlamHarris>,
    pub jumps: u64,
    /// Reinfections of ancestors during their generation intervals.
    pub r_inherited: u64,
    pub reinfections: u64,
}

#[derive(Debug, Clone)]
struct Deme {
    sus: Vec<u64>,
    sus_total: u64,
    members: [Vec<usize>; 4],
    hist: [Vec<u64>; 4],
}

impl Deme {
    fn new(width: usize) -> Self {
        Self {
            sus: vec![0; width],
            sus_total: 0,
            members: Default::default(),
            hist: std::array::from_fn(|_| vec![0; width]),
        }
    }

    fn count(&self, c: Class) -> u64 {
        self.members[c.idx()].len() as u64
    }

    fn marginal_totals(&self) -> [u64; 2] {
        [
            self.sus_total + self.count(Class::I1) + self.count(Class::P1),
            self.sus_total + self.count(Class::I2) + self.count(Class::P2),
        ]
    }

    /// Whether the two marginals differ at this deme.
    fn differs(&self) -> bool {
        let h = &self.hist;
        (0..self.sus.len()).any(|k| h[0][k] + h[2][k] != h[1][k] + h[3][k])
    }

    fn diff_mass(&self) -> u64 {
        let h = &self.hist;
        (0..self.sus.len())
            .map(|k| (h[0][k] + h[2][k]).abs_diff(h[1][k] + h[3][k]))
            .sum()
    }
}

/// Class-resolved state of the coupling on the active box.
#[derive(Debug, Clone)]
pub struct CouplingState {
    pub(crate) params: ModelParams,
    pub(crate) trunc: TruncationParams,
    pub(crate) active: ActiveBox,
    fitness: Vec<f64>,
    demes: Vec<Deme>,
    pub(crate) particles: Vec<Particle>,
    free: Vec<usize>,
    pub(crate) exterior: [Configuration; 2],
    pub(crate) clock: f64,
    pub(crate) max_jumps: u64,
    pub(crate) total_reinfections: u64,
}

/// Initial class assignment: class 0 gets `min(a, b)`, class 1 gets
/// `(a - b)^+` and class 2 gets `(b - a)^+`.
pub fn init_coupling(
    a: &Configuration,
    b: &Configuration,
    p: &ModelParams,
    t: &TruncationParams,
    track_labels: bool,
) -> CouplingState {
    CouplingState::new(a, b, p, t, track_labels)
}

impl CouplingState {
    pub fn new(
        a: &Configuration,
        b: &Configuration,
        p: &ModelParams,
        t: &TruncationParams,
        track_labels: bool,
    ) -> Self {
        let active = t.active_box(p.l);
        let kmax = a
            .max_type()
            .unwrap_or(0)
            .max(b.max_type().unwrap_or(0))
            .max(t.k_n);
        let width = kmax as usize + 1;
        let mut state = Self {
            params: p.clone(),
            trunc: *t,
            active,
            fitness: p.fitness.table(kmax + 1),
            demes: (0..active.len()).map(|_| Deme::new(width)).collect(),
            particles: Vec::new(),
            free: Vec::new(),
            exterior: [Configuration::new(), Configuration::new()],
            clock: 0.0,
            max_jumps: 0,
            total_reinfections: 0,
        };
        let mut sites: Vec<i64> = a
            .iter()
            .map(|(i, _)| i)
            .chain(b.iter().map(|(i, _)| i))
            .collect();
        sites.sort_unstable();
        sites.dedup();
        let empty = DemeState::new();
        let mut next_root = 1u64;
        for site in sites {
            let da = a.deme(site).unwrap_or(&empty);
            let db = b.deme(site).unwrap_or(&empty);
            if !active.contains(site) {
                state.exterior[0].set_deme(site, da.clone());
                state.exterior[1].set_deme(site, db.clone());
                continue;
            }
            let idx = active.index(site);
            for k in 0..=kmax {
                let (ca, cb) = (da.get(k), db.get(k));
                let shared = ca.min(cb);
                state.demes[idx].sus[k as usize] += shared;
                state.demes[idx].sus_total += shared;
            }
            for (class, src, other) in [(Class::I1, da, db), (Class::I2, db, da)] {
                for (k, c) in src.iter() {
                    for _ in 0..c.saturating_sub(other.get(k)) {
                        let label = track_labels.then(|| UlamHarris::root(next_root));
                        next_root += 1;
                        state.insert(class, idx, k, None, label, 0, 0);
                    }
                }
            }
        }
        state
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn trunc(&self) -> &TruncationParams {
        &self.trunc
    }

    pub fn active_box(&self) -> ActiveBox {
        self.active
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn susceptible(&self, site: i64) -> DemeState {
        if !self.active.contains(site) {
            return DemeState::new();
        }
        let d = &self.demes[self.active.index(site)];
        DemeState::from_counts(d.sus.iter().enumerate().map(|(k, &c)| (k as u32, c)))
    }

    pub fn class_histogram(&self, site: i64, class: Class) -> DemeState {
        if !self.active.contains(site) {
            return DemeState::new();
        }
        let d = &self.demes[self.active.index(site)];
        DemeState::from_counts(
            d.hist[class.idx()]
                .iter()
                .enumerate()
                .map(|(k, &c)| (k as u32, c)),
        )
    }

    pub fn class_count(&self, site: i64, class: Class) -> u64 {
        if !self.active.contains(site) {
            return 0;
        }
        self.demes[self.active.index(site)].count(class)
    }

    pub fn tracked_count(&self) -> usize {
        self.demes
            .iter()
            .map(|d| d.members.iter().map(Vec::len).sum::<usize>())
            .sum()
    }

    pub fn tracked(&self) -> Vec<TrackedView> {
        let mut out = Vec::new();
        for d in &self.demes {
            for m in &d.members {
                for &id in m {
                    out.push(self.view(id));
                }
            }
        }
        out.sort_by_key(|v| v.id);
        out
    }

    pub fn view(&self, id: usize) -> TrackedView {
        let p = &self.particles[id];
        TrackedView {
            id,
            class: p.class,
            site: self.active.site(p.deme),
            k: p.k,
            dual: p.dual,
            label: p.label.clone(),
            jumps: p.jumps,
            r_inherited: p.r_inherited,
            reinfections: p.reinfections,
        }
    }

    /// Ids of tracked particles of `class` at `site`, in storage order.
    pub fn members(&self, site: i64, class: Class) -> Vec<usize> {
        if !self.active.contains(site) {
            return Vec::new();
        }
        self.demes[self.active.index(site)].members[class.idx()].clone()
    }

    /// Marginal `eta^(i) = class 0 + class i + class i*`, exterior included.
    pub fn marginal(&self, i: u8) -> Configuration {
        let mut c = self.exterior[(i - 1) as usize].clone();
        let (ci, pi) = (Class::infected(i).idx(), Class::partial(i).idx());
        for (idx, d) in self.demes.iter().enumerate() {
            let site = self.active.site(idx);
            for k in 0..d.sus.len() {
                c.add(site, k as u32, d.sus[k] + d.hist[ci][k] + d.hist[pi][k]);
            }
        }
        c
    }

    pub fn marginal_totals(&self, site: i64) -> [u64; 2] {
        if self.active.contains(site) {
            self.demes[self.active.index(site)].marginal_totals()
        } else {
            [
                self.exterior[0].total_at(site),
                self.exterior[1].total_at(site),
            ]
        }
    }

    pub fn no_tracked(&self) -> bool {
        self.tracked_count() == 0
    }

    pub(crate) fn deme_differs(&self, idx: usize) -> bool {
        self.demes[idx].differs()
    }

    /// `sum_{x,k} |eta^(1)_k(x) - eta^(2)_k(x)|`, exterior included.
    pub fn diff_mass(&self) -> u64 {
        let inner: u64 = self.demes.iter().map(Deme::diff_mass).sum();
        let outer: u64 = self.exterior[0]
            .iter()
            .map(|(i, d)| d.l1_distance(self.exterior[1].deme(i).unwrap_or(&DemeState::new())))
            .sum::<u64>()
            + self.exterior[1]
                .iter()
                .filter(|(i, _)| self.exterior[0].deme(*i).is_none())
                .map(|(_, d)| d.total())
                .sum::<u64>();
        inner + outer
    }

    /// Occupied sites where the marginals differ.
    pub fn diff_sites(&self) -> Vec<i64> {
        let mut out: Vec<i64> = (0..self.demes.len())
            .filter(|&i| self.demes[i].differs())
            .map(|i| self.active.site(i))
            .collect();
        let empty = DemeState::new();
        for (i, d) in self.exterior[0].iter() {
            if d != self.exterior[1].deme(i).unwrap_or(&empty) {
                out.push(i);
            }
        }
        for (i, _) in self.exterior[1].iter() {
            if self.exterior[0].deme(i).is_none() {
                out.push(i);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn n_demes(&self) -> usize {
        self.demes.len()
    }

    #[allow(clippy::too_many_arguments)]
    fn insert(
        &mut self,
        class: Class,
        deme: usize,
        k: u32,
        dual: Option<usize>,
        label: Option<UlamHarris>,
        jumps: u64,
        r_inherited: u64,
    ) -> usize {
        let d = &mut self.demes[deme];
        let slot = d.members[class.idx()].len();
        let p = Particle {
            class,
            deme,
            k,
            dual,
            slot,
            label,
            generated: 0,
            jumps,
            r_inherited,
            reinfections: 0,
            alive: true,
        };
        let id = match self.free.pop() {
            Some(id) => {
                self.particles[id] = p;
                id
            }
            None => {
                self.particles.push(p);
                self.particles.len() - 1
            }
        };
        d.members[class.idx()].push(id);
        d.hist[class.idx()][k as usize] += 1;
        self.max_jumps = self.max_jumps.max(jumps);
        id
    }

    fn detach(&mut self, id: usize) {
        let (class, deme, slot, k) = {
            let p = &self.particles[id];
            (p.class, p.deme, p.slot, p.k)
        };
        let d = &mut self.demes[deme];
        let list = &mut d.members[class.idx()];
        list.swap_remove(slot);
        if let Some(&moved) = list.get(slot) {
            self.particles[moved].slot = slot;
        }
        d.hist[class.idx()][k as usize] -= 1;
    }

    fn attach(&mut self, id: usize, class: Class, deme: usize) {
        let k = self.particles[id].k;
        let d = &mut self.demes[deme];
        let slot = d.members[class.idx()].len();
        d.members[class.idx()].push(id);
        d.hist[class.idx()][k as usize] += 1;
        let p = &mut self.particles[id];
        p.class = class;
        p.deme = deme;
        p.slot = slot;
    }

    fn kill(&mut self, id: usize) {
        self.detach(id);
        self.particles[id].alive = false;
        self.particles[id].label = None;
        self.free.push(id);
    }

    fn set_class(&mut self, id: usize, class: Class) {
        let deme = self.particles[id].deme;
        self.detach(id);
        self.attach(id, class, deme);
    }

    fn move_to(&mut self, id: usize, deme: usize) {
        let class = self.particles[id].class;
        self.detach(id);
        self.attach(id, class, deme);
        let p = &mut self.particles[id];
        p.jumps += 1;
        self.max_jumps = self.max_jumps.max(p.jumps);
    }

    /// Inserts a new tracked particle generated by `parent`.
    fn generate(&mut self, parent: usize, class: Class, k: u32, dual: Option<usize>) -> usize {
        let (label, jumps, r) = {
            let p = &mut self.particles[parent];
            p.generated += 1;
            let label = p.label.as_ref().map(|l| l.child(p.generated));
            (label, p.jumps, p.r_inherited + p.reinfections)
        };
        let deme = self.particles[parent].deme;
        self.insert(class, deme, k, dual, label, jumps, r)
    }

    fn q(&self, plus: bool, u: u64) -> f64 {
        let poly = if plus {
            &self.params.q_plus
        } else {
            &self.params.q_minus
        };
        q_scaled(poly, self.params.n, u as f64)
    }

    fn fit(&self, k: usize) -> f64 {
        if k as u32 <= self.trunc.k_n {
            self.fitness[k]
        } else {
            0.0
        }
    }

    /// All per-particle rates and channel totals at deme index `idx`.
    pub(crate) fn rates_at(&self, idx: usize) -> CouplingRates {
        let d = &self.demes[idx];
        let site = self.active.site(idx);
        let n = d.marginal_totals();
        let counts = [
            d.count(Class::I1),
            d.count(Class::I2),
            d.count(Class::P1),
            d.count(Class::P2),
        ];
        let c0 = d.sus_total;
        let qp = [self.q(true, n[0]), self.q(true, n[1])];
        let qm = [self.q(false, n[0]), self.q(false, n[1])];
        let a = [counts[0] > counts[1], counts[1] > counts[0]];
        let s0: f64 = (0..d.sus.len())
            .map(|k| self.fit(k) * d.sus[k] as f64)
            .sum();
        let weighted = |c: Class| -> f64 {
            (0..d.sus.len())
                .map(|k| self.fit(k) * d.hist[c.idx()][k] as f64)
                .sum()
        };
        let pos = |x: f64| x.max(0.0);
        let mut beta_induce = [[0.0; 2]; 2];
        let mut delta_transmit = [[0.0; 2]; 2];
        let mut delta_partial = [[0.0; 2]; 2];
        for i1 in 0..2 {
            for i2 in 0..2 {
                if !a[i1] {
                    continue;
                }
                let ci1 = counts[i1] as f64;
                beta_induce[i1][i2] = s0 / ci1 * pos(qp[i2] - qp[1 - i2]);
                delta_transmit[i1][i2] = c0 as f64 / ci1 * pos(qm[i2] - qm[1 - i2]);
                delta_partial[i1][i2] = pos(qm[i2] - qm[1 - i2]);
            }
        }
        let beta_min = qp[0].min(qp[1]);
        let delta_min = qm[0].min(qm[1]);
        let dirs = self.active.open_directions(site) as f64;
        let half = 0.5 * self.params.m * dirs;
        let mut totals = [0.0; 25];
        for (ch, slot) in CHANNELS.iter().zip(totals.iter_mut()) {
            *slot = match *ch {
                Channel::MigrateSusceptible => half * c0 as f64,
                Channel::MigrateInfected(i) => half * counts[(i - 1) as usize] as f64,
                Channel::MigratePair => half * counts[2] as f64,
                Channel::BirthInfected(i) => qp[(i - 1) as usize] * weighted(Class::infected(i)),
                Channel::BirthPartial(i) => qp[(i - 1) as usize] * weighted(Class::partial(i)),
                Channel::BirthMin => {
                    if c0 > 0 {
                        beta_min * s0
                    } else {
                        0.0
                    }
                }
                Channel::Induce(i1, i2) => {
                    counts[(i1 - 1) as usize] as f64
                        * beta_induce[(i1 - 1) as usize][(i2 - 1) as usize]
                }
                Channel::DeathInfected(i) => counts[(i - 1) as usize] as f64 * qm[(i - 1) as usize],
                Channel::DeathMin => c0 as f64 * delta_min,
                Channel::Transmit(i1, i2) => {
                    counts[(i1 - 1) as usize] as f64
                        * delta_transmit[(i1 - 1) as usize][(i2 - 1) as usize]
                }
                Channel::DeathPair => counts[2] as f64 * delta_min,
                Channel::Partial(i1, i2) => {
                    counts[(i2 + 1) as usize] as f64
                        * delta_partial[(i1 - 1) as usize][(i2 - 1) as usize]
                }
            };
        }
        let total = totals.iter().sum();
        CouplingRates {
            n,
            counts,
            susceptible: c0,
            beta_infected: qp,
            beta_min,
            beta_induce,
            delta_infected: qm,
            delta_min,
            delta_transmit,
            delta_partial,
            totals,
            total,
        }
    }

    fn uniform_member(&self, idx: usize, class: Class, rng: &mut SimRng) -> usize {
        let m = &self.demes[idx].members[class.idx()];
        m[rng.below(m.len() as u64) as usize]
    }

    /// Member of `class` chosen with probability proportional to `s_k` (k <= K_n).
    fn fitness_member(&self, idx: usize, class: Class, rng: &mut SimRng) -> usize {
        let m = &self.demes[idx].members[class.idx()];
        let total: f64 = m
            .iter()
            .map(|&id| self.fit(self.particles[id].k as usize))
            .sum();
        let mut target = rng.uniform() * total;
        let mut last = m[0];
        for &id in m {
            let w = self.fit(self.particles[id].k as usize);
            if w <= 0.0 {
                continue;
            }
            last = id;
            if target < w {
                return id;
            }
            target -= w;
        }
        last
    }

    fn susceptible_type(&self, idx: usize, weighted: bool, rng: &mut SimRng) -> u32 {
        let d = &self.demes[idx];
        let w = |k: usize| {
            if weighted {
                self.fit(k) * d.sus[k] as f64
            } else {
                d.sus[k] as f64
            }
        };
        let total: f64 = (0..d.sus.len()).map(w).sum();
        let mut target = rng.uniform() * total;
        let mut last = 0;
        for k in 0..d.sus.len() {
            let wk = w(k);
            if wk <= 0.0 {
                continue;
            }
            last = k;
            if target < wk {
                return k as u32;
            }
            target -= wk;
        }
        last as u32
    }

    fn mutate(&self, k: u32, rng: &mut SimRng) -> Option<u32> {
        if rng.bernoulli(self.params.mu) {
            (k < self.trunc.k_n).then_some(k + 1)
        } else {
            Some(k)
        }
    }

    fn direction(&self, idx: usize, rng: &mut SimRng) -> i64 {
        let site = self.active.site(idx);
        let (l, r) = (
            self.active.contains(site - 1),
            self.active.contains(site + 1),
        );
        let left = if l && r { rng.bernoulli(0.5) } else { l };
        if left {
            site - 1
        } else {
            site + 1
        }
    }

    /// Draws the channel and every random choice of the next event at deme `idx`.
    pub fn draw_event(&self, idx: usize, rng: &mut SimRng) -> CouplingEvent {
        let rates = self.rates_at(idx);
        let mut v = rng.uniform() * rates.total;
        let mut chosen = None;
        for (ch, &w) in CHANNELS.iter().zip(rates.totals.iter()) {
            if w <= 0.0 {
                continue;
            }
            chosen = Some(*ch);
            if v < w {
                break;
            }
            v -= w;
        }
        let site = self.active.site(idx);
        match chosen.expect("deme with positive rate has a channel") {
            Channel::MigrateSusceptible => {
                let k = self.susceptible_type(idx, false, rng);
                CouplingEvent::MigrateSusceptible {
                    site,
                    k,
                    to: self.direction(idx, rng),
                }
            }
            Channel::MigrateInfected(i) => {
                let particle = self.uniform_member(idx, Class::infected(i), rng);
                CouplingEvent::MigrateInfected {
                    particle,
                    to: self.direction(idx, rng),
                }
            }
            Channel::MigratePair => {
                let particle = self.uniform_member(idx, Class::P1, rng);
                CouplingEvent::MigratePair {
                    particle,
                    to: self.direction(idx, rng),
                }
            }
            Channel::BirthInfected(i) | Channel::BirthPartial(i) => {
                let class = if matches!(chosen, Some(Channel::BirthInfected(_))) {
                    Class::infected(i)
                } else {
                    Class::partial(i)
                };
                let parent = self.fitness_member(idx, class, rng);
                CouplingEvent::BirthTracked {
                    parent,
                    offspring: self.mutate(self.particles[parent].k, rng),
                }
            }
            Channel::BirthMin => {
                let k = self.susceptible_type(idx, true, rng);
                CouplingEvent::BirthSusceptible {
                    site,
                    offspring: self.mutate(k, rng),
                }
            }
            Channel::Induce(i1, i2) => {
                let inducer = self.uniform_member(idx, Class::infected(i1), rng);
                let k = self.susceptible_type(idx, true, rng);
                CouplingEvent::Induce {
                    inducer,
                    class: i2,
                    offspring: self.mutate(k, rng),
                }
            }
            Channel::DeathInfected(i) => CouplingEvent::DeathInfected {
                particle: self.uniform_member(idx, Class::infected(i), rng),
            },
            Channel::DeathMin => CouplingEvent::DeathSusceptible {
                site,
                k: self.susceptible_type(idx, false, rng),
            },
            Channel::Transmit(i1, i2) => {
                let transmitter = self.uniform_member(idx, Class::infected(i1), rng);
                let k = self.susceptible_type(idx, false, rng);
                CouplingEvent::Transmit { transmitter, i2, k }
            }
            Channel::DeathPair => CouplingEvent::DeathPair {
                particle: self.uniform_member(idx, Class::P1, rng),
            },
            Channel::Partial(i1, i2) => {
                let particle = self.uniform_member(idx, Class::partial(i2), rng);
                let replacement =
                    (i1 == i2).then(|| self.uniform_member(idx, Class::infected(i2), rng));
                CouplingEvent::Partial {
                    particle,
                    i1,
                    replacement,
                }
            }
        }
    }

    fn broken(&self, msg: impl Into<String>) -> InfectionError {
        InfectionError::InvariantBroken {
            time: self.clock,
            msg: msg.into(),
        }
    }

    fn live(&self, id: usize, classes: &[Class]) -> Result<&Particle, InfectionError> {
        match self.particles.get(id) {
            Some(p) if p.alive && classes.contains(&p.class) => Ok(p),
            _ => Err(self.broken(format!("particle {id} is not a live {classes:?} particle"))),
        }
    }

    fn deme_of_site(&self, site: i64) -> Result<usize, InfectionError> {
        if self.active.contains(site) {
            Ok(self.active.index(site))
        } else {
            Err(self.broken(format!("site {site} outside the active box")))
        }
    }

    /// Applies `ev`; returns the deme indices whose rates changed.
    pub fn apply_coupling_event(
        &mut self,
        ev: &CouplingEvent,
    ) -> Result<Vec<usize>, InfectionError> {
        let touched = match *ev {
            CouplingEvent::MigrateSusceptible { site, k, to } => {
                let (from, to) = (self.deme_of_site(site)?, self.deme_of_site(to)?);
                if self.demes[from].sus.get(k as usize).copied().unwrap_or(0) == 0 {
                    return Err(self.broken("migrating susceptible absent"));
                }
                self.demes[from].sus[k as usize] -= 1;
                self.demes[from].sus_total -= 1;
                self.demes[to].sus[k as usize] += 1;
                self.demes[to].sus_total += 1;
                vec![from, to]
            }
            CouplingEvent::MigrateInfected { particle, to } => {
                let from = self.live(particle, &[Class::I1, Class::I2])?.deme;
                let to = self.deme_of_site(to)?;
                self.move_to(particle, to);
                vec![from, to]
            }
            CouplingEvent::MigratePair { particle, to } => {
                let p = self.live(particle, &[Class::P1])?;
                let (from, dual) = (
                    p.deme,
                    p.dual
                        .ok_or_else(|| self.broken("1* particle without dual"))?,
                );
                let to = self.deme_of_site(to)?;
                self.move_to(particle, to);
                self.move_to(dual, to);
                vec![from, to]
            }
            CouplingEvent::BirthTracked { parent, offspring } => {
                let p = self.live(parent, &[Class::I1, Class::I2, Class::P1, Class::P2])?;
                let (deme, side) = (p.deme, p.class.side());
                if let Some(k) = offspring {
                    self.generate(parent, Class::infected(side), k, None);
                }
                vec![deme]
            }
            CouplingEvent::BirthSusceptible { site, offspring } => {
                let deme = self.deme_of_site(site)?;
                if let Some(k) = offspring {
                    self.demes[deme].sus[k as usize] += 1;
                    self.demes[deme].sus_total += 1;
                }
                vec![deme]
            }
            CouplingEvent::Induce {
                inducer,
                class,
                offspring,
            } => {
                let deme = self.live(inducer, &[Class::I1, Class::I2])?.deme;
                if let Some(k) = offspring {
                    self.generate(inducer, Class::infected(class), k, None);
                }
                vec![deme]
            }
            CouplingEvent::DeathInfected { particle } => {
                let deme = self.live(particle, &[Class::I1, Class::I2])?.deme;
                self.kill(particle);
                vec![deme]
            }
            CouplingEvent::DeathSusceptible { site, k } => {
                let deme = self.deme_of_site(site)?;
                if self.demes[deme].sus.get(k as usize).copied().unwrap_or(0) == 0 {
                    return Err(self.broken("dying susceptible absent"));
                }
                self.demes[deme].sus[k as usize] -= 1;
                self.demes[deme].sus_total -= 1;
                vec![deme]
            }
            CouplingEvent::Transmit { transmitter, i2, k } => {
                let p = self.live(transmitter, &[Class::I1, Class::I2])?;
                let (deme, i1) = (p.deme, p.class.side());
                if self.demes[deme].sus.get(k as usize).copied().unwrap_or(0) == 0 {
                    return Err(self.broken("infected susceptible absent"));
                }
                self.demes[deme].sus[k as usize] -= 1;
                self.demes[deme].sus_total -= 1;
                if i1 != i2 {
                    self.generate(transmitter, Class::infected(3 - i2), k, None);
                } else {
                    let new =
                        self.generate(transmitter, Class::partial(3 - i2), k, Some(transmitter));
                    self.set_class(transmitter, Class::partial(i1));
                    self.particles[transmitter].dual = Some(new);
                }
                vec![deme]
            }
            CouplingEvent::DeathPair { particle } => {
                let p = self.live(particle, &[Class::P1])?;
                let (deme, dual) = (
                    p.deme,
                    p.dual
                        .ok_or_else(|| self.broken("1* particle without dual"))?,
                );
                self.live(dual, &[Class::P2])?;
                self.kill(particle);
                self.kill(dual);
                vec![deme]
            }
            CouplingEvent::Partial {
                particle,
                i1,
                replacement,
            } => {
                let p = self.live(particle, &[Class::P1, Class::P2])?;
                let (deme, i2) = (p.deme, p.class.side());
                let dual = p
                    .dual
                    .ok_or_else(|| self.broken("partially recovered particle without dual"))?;
                self.kill(particle);
                if i1 != i2 {
                    self.set_class(dual, Class::infected(3 - i2));
                    self.particles[dual].dual = None;
                    self.particles[dual].reinfections += 1;
                    self.total_reinfections += 1;
                } else {
                    let q = replacement
                        .ok_or_else(|| self.broken("replacement without a class-i particle"))?;
                    let qd = self.live(q, &[Class::infected(i2)])?.deme;
                    if qd != deme {
                        return Err(self.broken("replacement particle at another deme"));
                    }
                    self.set_class(q, Class::partial(i2));
                    self.particles[q].dual = Some(dual);
                    self.particles[dual].dual = Some(q);
                }
                vec![deme]
            }
        };
        Ok(touched)
    }

    /// Dual balance and co-location at deme `idx`.
    pub(crate) fn check_deme(&self, idx: usize) -> Result<(), InfectionError> {
        let d = &self.demes[idx];
        if d.members[Class::P1.idx()].len() != d.members[Class::P2.idx()].len() {
            return Err(self.broken(format!("dual imbalance at site {}", self.active.site(idx))));
        }
        for c in [Class::P1, Class::P2] {
            for &id in &d.members[c.idx()] {
                let p = &self.particles[id];
                let dual = p
                    .dual
                    .ok_or_else(|| self.broken("partial particle without dual"))?;
                let q = &self.particles[dual];
                let want = if c == Class::P1 { Class::P2 } else { Class::P1 };
                if !q.alive || q.class != want || q.dual != Some(id) || q.deme != p.deme {
                    return Err(self.broken(format!("dual pair ({id}, {dual}) broken")));
                }
            }
        }
        for c in [Class::I1, Class::I2] {
            for &id in &d.members[c.idx()] {
                if self.particles[id].dual.is_some() {
                    return Err(self.broken("infected particle carries a dual"));
                }
            }
        }
        Ok(())
    }

    /// Full consistency check of every deme (O(state)).
    pub fn check_all(&self) -> Result<(), InfectionError> {
        for idx in 0..self.demes.len() {
            self.check_deme(idx)?;
            let d = &self.demes[idx];
            for c in 0..4 {
                let mut h = vec![0u64; d.sus.len()];
                for &id in &d.members[c] {
                    let p = &self.particles[id];
                    if !p.alive || p.deme != idx || p.class.idx() != c {
                        return Err(self.broken("member list out of sync"));
                    }
                    h[p.k as usize] += 1;
                }
                if h != d.hist[c] {
                    return Err(self.broken("class histogram out of sync"));
                }
            }
            if d.sus.iter().sum::<u64>() != d.sus_total {
                return Err(self.broken("susceptible total out of sync"));
            }
        }
        Ok(())
    }
}

/// Rates of every coupling channel at `site`.
pub fn coupling_rates(state: &CouplingState, site: i64) -> Option<CouplingRates> {
    state
        .active
        .contains(site)
        .then(|| state.rates_at(state.active.index(site)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FitnessSpec, Polynomial};
    use crate::rng::seed_stream;

    fn params(q_plus: Vec<f64>) -> ModelParams {
        ModelParams {
            l: 1.0,
            m: 1.0,
            n: 1,
            mu: 0.0,
            fitness: FitnessSpec::Geometric(0.5),
            q_plus: Polynomial::new(q_plus),
            q_minus: Polynomial::new(vec![0.0, 1.0]),
        }
    }

    fn one_site(c0: u64, c1: u64, c2: u64) -> (Configuration, Configuration) {
        let mut a = Configuration::new();
        let mut b = Configuration::new();
        a.add(0, 0, c0 + c1);
        b.add(0, 0, c0 + c2);
        (a, b)
    }

    #[test]
    fn initial_classes() {
        let mut a = Configuration::new();
        a.add(0, 0, 3);
        let mut b = Configuration::new();
        b.add(0, 0, 1);
        b.add(0, 1, 1);
        let s = init_coupling(
            &a,
            &b,
            &params(vec![1.0]),
            &TruncationParams::new(1.0, 2),
            true,
        );
        assert_eq!(s.susceptible(0), DemeState::from_counts([(0, 1)]));
        assert_eq!(
            s.class_histogram(0, Class::I1),
            DemeState::from_counts([(0, 2)])
        );
        assert_eq!(
            s.class_histogram(0, Class::I2),
            DemeState::from_counts([(1, 1)])
        );
        assert_eq!(s.marginal(1), a);
        assert_eq!(s.marginal(2), b);
        assert_eq!(s.diff_sites(), vec![0]);
        assert_eq!(s.diff_mass(), 3);
        let roots: Vec<u64> = s
            .tracked()
            .iter()
            .map(|v| v.label.as_ref().unwrap().root)
            .collect();
        assert_eq!(roots, vec![1, 2, 3]);

        let same = init_coupling(
            &a,
            &a,
            &params(vec![1.0]),
            &TruncationParams::new(1.0, 2),
            false,
        );
        assert!(same.no_tracked());
    }

    #[test]
    fn transmit_and_induce_by_hand() {
        let (a, b) = one_site(1, 1, 0);
        let s = init_coupling(
            &a,
            &b,
            &params(vec![0.0, 1.0]),
            &TruncationParams::new(0.5, 2),
            false,
        );
        let r = coupling_rates(&s, 0).unwrap();
        assert_eq!(r.delta_transmit[0][0], 1.0);
        assert_eq!(r.delta_transmit[0][1], 0.0);
        assert_eq!(r.beta_induce[0][0], 1.0);
        let s = init_coupling(
            &a,
            &b,
            &params(vec![1.0]),
            &TruncationParams::new(0.5, 2),
            false,
        );
        let r = coupling_rates(&s, 0).unwrap();
        assert!(r.beta_induce.iter().flatten().all(|&x| x == 0.0));
        let (a, b) = one_site(2, 1, 1);
        let s = init_coupling(
            &a,
            &b,
            &params(vec![1.0]),
            &TruncationParams::new(0.5, 2),
            false,
        );
        let r = coupling_rates(&s, 0).unwrap();
        assert!(r.delta_transmit.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn transmission_with_partial_recovery() {
        let (a, b) = one_site(1, 1, 0);
        let mut s = init_coupling(
            &a,
            &b,
            &params(vec![1.0]),
            &TruncationParams::new(0.5, 2),
            true,
        );
        let t = s.members(0, Class::I1)[0];
        s.apply_coupling_event(&CouplingEvent::Transmit {
            transmitter: t,
            i2: 1,
            k: 0,
        })
        .unwrap();
        assert_eq!(s.susceptible(0).total(), 0);
        assert_eq!(s.class_count(0, Class::P1), 1);
        assert_eq!(s.class_count(0, Class::P2), 1);
        let p2 = s.members(0, Class::P2)[0];
        assert_eq!(s.view(t).class, Class::P1);
        assert_eq!(s.view(t).dual, Some(p2));
        assert_eq!(s.view(p2).dual, Some(t));
        assert_eq!(s.view(p2).label.unwrap().to_string(), "1.1");
        s.check_all().unwrap();
        // the former susceptible left realisation 1: a death there only
        assert_eq!(s.marginal_totals(0), [1, 1]);

        // reinfection: the 1* dies, its 2* dual becomes class 2
        s.apply_coupling_event(&CouplingEvent::Partial {
            particle: t,
            i1: 2,
            replacement: None,
        })
        .unwrap();
        assert_eq!(s.view(p2).class, Class::I2);
        assert_eq!(s.view(p2).reinfections, 1);
        s.check_all().unwrap();
    }

    #[test]
    fn pair_death_removes_two() {
        let (a, b) = one_site(1, 1, 0);
        let mut s = init_coupling(
            &a,
            &b,
            &params(vec![1.0]),
            &TruncationParams::new(0.5, 2),
            false,
        );
        let t = s.members(0, Class::I1)[0];
        s.apply_coupling_event(&CouplingEvent::Transmit {
            transmitter: t,
            i2: 1,
            k: 0,
        })
        .unwrap();
        assert_eq!(s.tracked_count(), 2);
        s.apply_coupling_event(&CouplingEvent::DeathPair { particle: t })
            .unwrap();
        assert_eq!(s.tracked_count(), 0);
        s.check_all().unwrap();
    }

    #[test]
    fn replacement_keeps_pairs() {
        let (a, b) = one_site(1, 2, 0);
        let mut s = init_coupling(
            &a,
            &b,
            &params(vec![1.0]),
            &TruncationParams::new(0.5, 2),
            false,
        );
        let ids = s.members(0, Class::I1);
        s.apply_coupling_event(&CouplingEvent::Transmit {
            transmitter: ids[0],
            i2: 1,
            k: 0,
        })
        .unwrap();
        let p2 = s.members(0, Class::P2)[0];
        let other = s.members(0, Class::I1)[0];
        s.apply_coupling_event(&CouplingEvent::Partial {
            particle: ids[0],
            i1: 1,
            replacement: Some(other),
        })
        .unwrap();
        assert_eq!(s.view(other).class, Class::P1);
        assert_eq!(s.view(p2).dual, Some(other));
        s.check_all().unwrap();
    }

    #[test]
    fn stale_event_is_rejected() {
        let (a, b) = one_site(1, 1, 0);
        let mut s = init_coupling(
            &a,
            &b,
            &params(vec![1.0]),
            &TruncationParams::new(0.5, 2),
            false,
        );
        let r = s.apply_coupling_event(&CouplingEvent::DeathPair { particle: 0 });
        assert!(matches!(r, Err(InfectionError::InvariantBroken { .. })));
    }

    #[test]
    fn drawn_events_keep_invariants() {
        let mut p = params(vec![1.0, 0.5]);
        p.mu = 0.3;
        p.q_minus = Polynomial::new(vec![0.0, 1.0, 0.5]);
        let mut a = Configuration::uniform(2, 1);
        let mut b = a.clone();
        a.add(0, 1, 2);
        b.add(1, 0, 1);
        let mut s = init_coupling(&a, &b, &p, &TruncationParams::new(1.0, 2), true);
        let mut rng = seed_stream(11, 0).rng();
        for _ in 0..2000 {
            let idx = (0..s.n_demes()).find(|&i| s.rates_at(i).total > 0.0);
            let Some(idx) = idx else { break };
            let ev = s.draw_event(idx, &mut rng);
            s.apply_coupling_event(&ev).unwrap();
            s.check_all().unwrap();
        }
    }
}
