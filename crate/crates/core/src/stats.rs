//! Observables and verification statistics over trajectories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{config_at, simulate_eta_n, EngineError, EventKind, Trajectory};
use crate::model::{Configuration, ModelParams, TruncationParams};
use crate::rng::seed_stream;

/// Default acceptance envelope for Monte-Carlo comparisons, in standard errors.
pub const DEFAULT_SE_ENVELOPE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Running mean and sum of squared deviations (Welford), mergeable.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAcc {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAcc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &MeanAcc) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn se(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean,
            se: self.se(),
            n: self.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: u64,
}

impl Estimate {
    /// `|a - b| / sqrt(se_a^2 + se_b^2)`, 0 when both are exact and equal,
    /// infinite when they are exact and differ.
    pub fn z_against(&self, other: &Estimate) -> f64 {
        let d = (self.mean - other.mean).abs();
        let se = (self.se * self.se + other.se * other.se).sqrt();
        if d == 0.0 {
            0.0
        } else {
            d / se
        }
    }
}

/// `||eta(T, x)||^p` estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub site: i64,
    pub p: u32,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub time: f64,
    pub rows: Vec<MomentRow>,
    /// Per exponent: largest mean over the probe set.
    pub sup_mean: BTreeMap<u32, f64>,
    /// Per exponent: `sup_mean / (sup_x ||eta_0(x)||^p + N^p)`.
    pub normalized_ratio: BTreeMap<u32, f64>,
}

pub const MOMENT_CSV_HEADER: &str = "site,p,mean,se,replicates";

impl MomentReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{MOMENT_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.16e},{:.16e},{}",
                r.site, r.p, r.estimate.mean, r.estimate.se, r.estimate.n
            );
        }
        s
    }
}

/// Mergeable per-(site, exponent) accumulator behind [`moment_estimate`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    pub time: f64,
    pub n: u64,
    pub sup_initial: u64,
    acc: BTreeMap<(i64, u32), MeanAcc>,
}

impl MomentAccumulator {
    pub fn new(time: f64, n: u64, sites: &[i64], exponents: &[u32]) -> Self {
        let acc = sites
            .iter()
            .flat_map(|&s| exponents.iter().map(move |&p| ((s, p), MeanAcc::new())))
            .collect();
        Self {
            time,
            n,
            sup_initial: 0,
            acc,
        }
    }

    pub fn push_config(&mut self, initial: &Configuration, at_time: &Configuration) {
        self.sup_initial = self.sup_initial.max(initial.sup_occupancy());
        for (&(site, p), a) in self.acc.iter_mut() {
            a.push((at_time.total_at(site) as f64).powi(p as i32));
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        self.sup_initial = self.sup_initial.max(other.sup_initial);
        for (k, a) in self.acc.iter_mut() {
            if let Some(b) = other.acc.get(k) {
                a.merge(b);
            }
        }
    }

    pub fn finish(&self) -> MomentReport {
        let rows: Vec<MomentRow> = self
            .acc
            .iter()
            .map(|(&(site, p), a)| MomentRow {
                site,
                p,
                estimate: a.estimate(),
            })
            .collect();
        let mut sup_mean = BTreeMap::new();
        for r in &rows {
            let e = sup_mean.entry(r.p).or_insert(f64::NEG_INFINITY);
            *e = f64::max(*e, r.estimate.mean);
        }
        let normalized_ratio = sup_mean
            .iter()
            .map(|(&p, &m)| {
                let norm =
                    (self.sup_initial as f64).powi(p as i32) + (self.n as f64).powi(p as i32);
                (p, m / norm)
            })
            .collect();
        MomentReport {
            time: self.time,
            rows,
            sup_mean,
            normalized_ratio,
        }
    }
}

/// Moment estimates of `||eta(T, x)||^p` over the probe `sites` from a set
/// of runs sharing parameters. The supremum in the report is over the probe
/// set only.
pub fn moment_estimate(
    runs: &[Trajectory],
    exponents: &[u32],
    sites: &[i64],
    time: f64,
) -> Result<MomentReport, StatsError> {
    let first = runs
        .first()
        .ok_or_else(|| StatsError::InvalidInput("no runs".into()))?;
    if runs.len() < 2 {
        return Err(StatsError::InvalidInput(
            "at least two runs are needed".into(),
        ));
    }
    if runs
        .iter()
        .any(|r| r.params != first.params || r.horizon < time)
    {
        return Err(StatsError::InvalidInput(
            "runs must share parameters and reach the probe time".into(),
        ));
    }
    let mut acc = MomentAccumulator::new(time, first.params.n, sites, exponents);
    for r in runs {
        let c = if r.horizon == time {
            r.final_config.clone()
        } else {
            config_at(r, time)?
        };
        acc.push_config(&r.initial, &c);
    }
    Ok(acc.finish())
}

/// A strict increase of the smallest mutation count carried by any living
/// particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Click {
    pub time: f64,
    pub from: u32,
    pub to: u32,
    /// Index of the event that caused it (always a death).
    pub event: usize,
    pub cause: EventKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClickRecord {
    pub clicks: Vec<Click>,
    /// Time at which the population died out; no clicks are recorded after it.
    pub extinction: Option<f64>,
}

pub const CLICK_CSV_HEADER: &str = "time,from,to,event";

impl ClickRecord {
    pub fn times(&self) -> Vec<f64> {
        self.clicks.iter().map(|c| c.time).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CLICK_CSV_HEADER}\n");
        for c in &self.clicks {
            let _ = writeln!(s, "{:.16e},{},{},{}", c.time, c.from, c.to, c.event);
        }
        s
    }
}

/// Scans a trajectory for clicks of the ratchet. The minimum is taken over
/// the whole configuration, frozen exterior included.
pub fn click_times(traj: &Trajectory) -> ClickRecord {
    let mut types: BTreeMap<u32, u64> = BTreeMap::new();
    for (_, d) in traj.initial.iter() {
        for (k, c) in d.iter() {
            *types.entry(k).or_default() += c;
        }
    }
    let mut rec = ClickRecord::default();
    let Some(mut min) = types.keys().next().copied() else {
        rec.extinction = Some(0.0);
        return rec;
    };
    for (i, ev) in traj.events.iter().enumerate() {
        match ev.kind {
            EventKind::Birth { offspring, .. } => *types.entry(offspring).or_default() += 1,
            EventKind::Death { k } => {
                if let Some(c) = types.get_mut(&k) {
                    *c -= 1;
                    if *c == 0 {
                        types.remove(&k);
                    }
                }
            }
            EventKind::MigrateLeft { .. } | EventKind::MigrateRight { .. } => continue,
        }
        match types.keys().next().copied() {
            None => {
                rec.extinction = Some(ev.time);
                return rec;
            }
            Some(now) if now > min => {
                rec.clicks.push(Click {
                    time: ev.time,
                    from: min,
                    to: now,
                    event: i,
                    cause: ev.kind,
                });
                min = now;
            }
            Some(now) => min = min.min(now),
        }
    }
    rec
}

/// Window statistics of one truncation level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub trunc: TruncationParams,
    /// Mean occupancy of each window site, in site order.
    pub site_means: Vec<(i64, Estimate)>,
    pub window_mass: Estimate,
    /// Mean of `sum_x sum_k k eta_k(T, x)` over the window.
    pub mutation_load: Estimate,
}

impl LevelStats {
    fn stats(&self) -> Vec<Estimate> {
        let mut v: Vec<Estimate> = self.site_means.iter().map(|(_, e)| *e).collect();
        v.push(self.window_mass);
        v.push(self.mutation_load);
        v
    }
}

/// Differences between successive levels, in combined-SE units.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDiff {
    pub from: usize,
    pub to: usize,
    pub mass_diff: f64,
    pub load_diff: f64,
    /// Largest z over every statistic of the pair.
    pub max_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub levels: Vec<LevelStats>,
    pub diffs: Vec<LevelDiff>,
    pub envelope: f64,
    /// The final pair agrees within the envelope on every statistic.
    pub converged: bool,
}

pub const CONVERGENCE_CSV_HEADER: &str = "level,lambda_n,K_n,window_mass,window_mass_se,mutation_load,mutation_load_se,max_z_to_previous";

impl ConvergenceTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CONVERGENCE_CSV_HEADER}\n");
        for (i, l) in self.levels.iter().enumerate() {
            let z = if i == 0 {
                String::new()
            } else {
                format!("{:.16e}", self.diffs[i - 1].max_z)
            };
            let _ = writeln!(
                s,
                "{i},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{z}",
                l.trunc.lambda_n,
                l.trunc.k_n,
                l.window_mass.mean,
                l.window_mass.se,
                l.mutation_load.mean,
                l.mutation_load.se
            );
        }
        s
    }
}

/// Runs `eta^n` for every level of `schedule` and compares window statistics
/// of successive levels. `window` is a half-width in sites. Level `l`,
/// replicate `r` uses `seed_stream(master_seed, r).derive(l + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn truncation_convergence(
    init: &Configuration,
    p: &ModelParams,
    schedule: &[TruncationParams],
    window: i64,
    time: f64,
    replicates: u64,
    master_seed: u64,
    envelope: f64,
) -> Result<ConvergenceTable, StatsError> {
    if schedule.is_empty() || replicates < 2 {
        return Err(StatsError::InvalidInput(
            "need a schedule and at least two replicates".into(),
        ));
    }
    if schedule
        .windows(2)
        .any(|w| !(w[1].lambda_n > w[0].lambda_n) || w[1].k_n < w[0].k_n)
    {
        return Err(StatsError::InvalidInput(
            "schedule must be increasing".into(),
        ));
    }
    let mut levels = Vec::new();
    for (li, t) in schedule.iter().enumerate() {
        let finals: Vec<Configuration> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                Ok(simulate_eta_n(
                    init,
                    p,
                    t,
                    time,
                    seed_stream(master_seed, r).derive(li as u64 + 1),
                )?
                .final_config)
            })
            .collect::<Result<_, StatsError>>()?;
        let mut sites = vec![MeanAcc::new(); (2 * window + 1).max(0) as usize];
        let (mut mass, mut load) = (MeanAcc::new(), MeanAcc::new());
        for c in &finals {
            let mut m = 0u64;
            let mut ld = 0u64;
            for (j, site) in (-window..=window).enumerate() {
                let total = c.total_at(site);
                sites[j].push(total as f64);
                m += total;
                if let Some(d) = c.deme(site) {
                    ld += d.iter().map(|(k, n)| k as u64 * n).sum::<u64>();
                }
            }
            mass.push(m as f64);
            load.push(ld as f64);
        }
        levels.push(LevelStats {
            trunc: *t,
            site_means: (-window..=window)
                .zip(sites.iter().map(MeanAcc::estimate))
                .collect(),
            window_mass: mass.estimate(),
            mutation_load: load.estimate(),
        });
    }
    let diffs: Vec<LevelDiff> = levels
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (a, b) = (w[0].stats(), w[1].stats());
            LevelDiff {
                from: i,
                to: i + 1,
                mass_diff: (w[1].window_mass.mean - w[0].window_mass.mean).abs(),
                load_diff: (w[1].mutation_load.mean - w[0].mutation_load.mean).abs(),
                max_z: a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| x.z_against(y))
                    .fold(0.0, f64::max),
            }
        })
        .collect();
    let converged = diffs.last().is_none_or(|d| d.max_z <= envelope);
    Ok(ConvergenceTable {
        levels,
        diffs,
        envelope,
        converged,
    })
}

/// `Delta_0`, `Delta` and `Delta_sp` between two configurations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DifferenceMass {
    /// `sum_{x,k} |a_k(x) - b_k(x)|`.
    pub delta0: u64,
    /// `(site, type)` pairs where the configurations differ.
    pub delta: BTreeSet<(i64, u32)>,
    /// Sites where they differ.
    pub delta_sp: BTreeSet<i64>,
}

pub fn difference_mass(a: &Configuration, b: &Configuration) -> DifferenceMass {
    let mut out = DifferenceMass::default();
    let sites: BTreeSet<i64> = a.iter().chain(b.iter()).map(|(s, _)| s).collect();
    for s in sites {
        let types: BTreeSet<u32> = a
            .deme(s)
            .into_iter()
            .chain(b.deme(s))
            .flat_map(|d| d.iter().map(|(k, _)| k))
            .collect();
        for k in types {
            let d = a.get(s, k).abs_diff(b.get(s, k));
            if d > 0 {
                out.delta0 += d;
                out.delta.insert((s, k));
                out.delta_sp.insert(s);
            }
        }
    }
    out
}

/// Hit counts at one seeding distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitCount {
    pub distance: f64,
    pub hits: u64,
    pub trials: u64,
}

impl HitCount {
    /// Haldane-corrected proportion `(h + 1/2) / (n + 1)`.
    pub fn p_hat(&self) -> f64 {
        (self.hits as f64 + 0.5) / (self.trials as f64 + 1.0)
    }

    /// Binomial standard error at the corrected proportion.
    pub fn se(&self) -> f64 {
        let p = self.p_hat();
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayFit {
    pub slope: f64,
    pub slope_se: f64,
    /// One-sided 95% upper confidence bound on the slope.
    pub slope_upper95: f64,
    /// Every successive increase of the hit frequency is within `envelope` SE.
    pub non_increasing: bool,
    pub decaying: bool,
}

const Z_95_ONE_SIDED: f64 = 1.6448536269514722;

/// Weighted least-squares fit of `log p_hat` on distance, with delta-method
/// weights `n p_hat / (1 - p_hat)`.
pub fn decay_fit(points: &[HitCount], envelope: f64) -> Result<DecayFit, StatsError> {
    if points.len() < 2 || points.iter().any(|p| p.trials == 0) {
        return Err(StatsError::InvalidInput(
            "need two or more distances with trials".into(),
        ));
    }
    let w: Vec<f64> = points
        .iter()
        .map(|p| p.trials as f64 * p.p_hat() / (1.0 - p.p_hat()))
        .collect();
    let x: Vec<f64> = points.iter().map(|p| p.distance).collect();
    let y: Vec<f64> = points.iter().map(|p| p.p_hat().ln()).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(a, b)| a * (b - xm).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(StatsError::InvalidInput(
            "distances must not all coincide".into(),
        ));
    }
    let sxy: f64 = w
        .iter()
        .zip(x.iter().zip(&y))
        .map(|(a, (b, c))| a * (b - xm) * (c - ym))
        .sum();
    let slope = sxy / sxx;
    let slope_se = (1.0 / sxx).sqrt();
    let slope_upper95 = slope + Z_95_ONE_SIDED * slope_se;
    let non_increasing = points.windows(2).all(|q| {
        let (a, b) = (
            q[0].hits as f64 / q[0].trials as f64,
            q[1].hits as f64 / q[1].trials as f64,
        );
        b - a <= envelope * (q[0].se().powi(2) + q[1].se().powi(2)).sqrt()
    });
    Ok(DecayFit {
        slope,
        slope_se,
        slope_upper95,
        non_increasing,
        decaying: slope_upper95 < 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EventRecord, Snapshot};
    use crate::rng::seed_stream;

    fn traj(initial: Configuration, events: Vec<EventRecord>) -> Trajectory {
        Trajectory {
            final_config: initial.clone(),
            initial,
            params: ModelParams::fisher_kpp(1.0, 1.0, 1, 0.1, 0.5),
            trunc: TruncationParams::new(2.0, 3),
            seed: seed_stream(0, 0),
            horizon: 1.0,
            events,
            snapshots: Vec::<Snapshot>::new(),
        }
    }

    fn death(time: f64, site: i64, k: u32, deme_total: u64) -> EventRecord {
        EventRecord {
            time,
            site,
            kind: EventKind::Death { k },
            deme_total,
            target_total: None,
        }
    }

    #[test]
    fn welford_merge_matches_pooled() {
        let xs: Vec<f64> = (0..57)
            .map(|i| ((i * 37) % 11) as f64 * 0.3 + i as f64 * 0.01)
            .collect();
        let mut all = MeanAcc::new();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (MeanAcc::new(), MeanAcc::new());
        xs[..20].iter().for_each(|&x| a.push(x));
        xs[20..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert_eq!(a.count(), all.count());
        assert!((a.mean() - all.mean()).abs() < 1e-12);
        assert!((a.variance() - all.variance()).abs() < 1e-12);
    }

    #[test]
    fn single_click_on_last_type_zero_death() {
        let mut c = Configuration::new();
        c.add(0, 0, 1);
        c.add(0, 1, 2);
        let t = traj(c, vec![death(0.25, 0, 0, 2)]);
        let rec = click_times(&t);
        assert_eq!(rec.times(), vec![0.25]);
        assert_eq!((rec.clicks[0].from, rec.clicks[0].to), (0, 1));
        assert_eq!(rec.extinction, None);
    }

    #[test]
    fn no_deaths_no_clicks_and_extinction_flag() {
        let c = Configuration::uniform(1, 0);
        assert!(click_times(&traj(c.clone(), vec![])).clicks.is_empty());
        let rec = click_times(&traj(c, vec![death(0.5, 0, 0, 0)]));
        assert!(rec.clicks.is_empty());
        assert_eq!(rec.extinction, Some(0.5));
    }

    #[test]
    fn difference_mass_examples() {
        let mut a = Configuration::new();
        a.add(0, 0, 3);
        let mut b = Configuration::new();
        b.add(0, 0, 1);
        b.add(0, 1, 1);
        let d = difference_mass(&a, &b);
        assert_eq!(d.delta0, 3);
        assert_eq!(d.delta.len(), 2);
        assert_eq!(d.delta_sp.len(), 1);
        assert_eq!(difference_mass(&a, &a), DifferenceMass::default());
        let mut far = Configuration::new();
        far.add(9, 2, 4);
        assert_eq!(difference_mass(&a, &far).delta0, 7);
    }

    #[test]
    fn decay_fit_detects_decay() {
        let pts = [
            HitCount {
                distance: 4.0,
                hits: 200,
                trials: 2000,
            },
            HitCount {
                distance: 8.0,
                hits: 20,
                trials: 2000,
            },
            HitCount {
                distance: 12.0,
                hits: 1,
                trials: 2000,
            },
            HitCount {
                distance: 16.0,
                hits: 0,
                trials: 2000,
            },
        ];
        let f = decay_fit(&pts, 3.0).unwrap();
        assert!(f.slope < 0.0 && f.decaying && f.non_increasing);
        let flat = [
            HitCount {
                distance: 4.0,
                hits: 10,
                trials: 100,
            },
            HitCount {
                distance: 8.0,
                hits: 10,
                trials: 100,
            },
        ];
        assert!(!decay_fit(&flat, 3.0).unwrap().decaying);
    }

    #[test]
    fn empty_initial_has_zero_moments() {
        let mut p = ModelParams::fisher_kpp(1.0, 1.0, 1, 0.0, 0.5);
        p.q_plus = crate::model::Polynomial::zero();
        let t = TruncationParams::new(2.0, 3);
        let runs: Vec<Trajectory> = (0..3)
            .map(|r| simulate_eta_n(&Configuration::new(), &p, &t, 1.0, seed_stream(1, r)).unwrap())
            .collect();
        let rep = moment_estimate(&runs, &[1, 2], &[-1, 0, 1], 1.0).unwrap();
        assert!(rep
            .rows
            .iter()
            .all(|r| r.estimate.mean == 0.0 && r.estimate.se == 0.0));
        assert_eq!(rep.rows.len(), 6);
    }
}
