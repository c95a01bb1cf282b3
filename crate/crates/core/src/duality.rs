//! Scaled Poisson polynomials, the duality function, reflected random-walk
//! kernels, correlation and Green's-function estimators, and Chernoff tails.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{simulate_zeta, Dynamics, EngineError, Simulator};
use crate::model::{ActiveBox, Configuration, ModelParams, TruncationParams};
use crate::rates::{birth_rate, death_rate};
use crate::rng::{seed_stream, SimRng};
use crate::stats::{Estimate, MeanAcc};

/// Largest box handled by [`rw_kernel`].
pub const MAX_KERNEL_SITES: usize = 2000;

pub const DEFAULT_QUADRATURE_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DualityError {
    #[error("box has {sites} sites; dense kernels are limited to {limit}")]
    SizeLimit { sites: usize, limit: usize },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Single-type occupancy, one count per site.
pub type Occupancy = BTreeMap<i64, u64>;

/// Per-site totals of a configuration.
pub fn occupancy(c: &Configuration) -> Occupancy {
    c.iter()
        .map(|(i, d)| (i, d.total()))
        .filter(|&(_, n)| n > 0)
        .collect()
}

/// `i (i-1) ... (i-j+1)`, or 1 when `j <= 0` or `i < 0`.
fn falling(i: i64, j: i64) -> f64 {
    if j <= 0 || i < 0 {
        return 1.0;
    }
    if i < j {
        return 0.0;
    }
    (0..j).map(|r| (i - r) as f64).product()
}

/// `D^N_j(i)`.
pub fn poisson_poly(n: u64, j: i64, i: i64) -> f64 {
    if j <= 0 || i < 0 {
        return 1.0;
    }
    falling(i, j) / (n as f64).powi(j as i32)
}

/// `prod_{x in sites} D^N_{xi(x)}(zeta(x))`.
pub fn duality_fn(xi: &Occupancy, zeta: &Occupancy, n: u64, sites: &[i64]) -> f64 {
    debug_assert!(xi.keys().chain(zeta.keys()).all(|s| sites.contains(s)));
    sites
        .iter()
        .map(|s| {
            let j = xi.get(s).copied().unwrap_or(0) as i64;
            let i = zeta.get(s).copied().unwrap_or(0) as i64;
            poisson_poly(n, j, i)
        })
        .product()
}

/// Which argument of the duality function the migration generator acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Dual particles `xi` move.
    First,
    /// Particles of `zeta` move.
    Second,
}

fn dense(o: &Occupancy, b: ActiveBox) -> Vec<i64> {
    let mut v = vec![0i64; b.len()];
    for (&s, &c) in o {
        if b.contains(s) {
            v[b.index(s)] += c as i64;
        }
    }
    v
}

fn unscaled(xi: &[i64], zeta: &[i64]) -> f64 {
    xi.iter().zip(zeta).map(|(&j, &i)| falling(i, j)).product()
}

/// `(m/2) L_m` applied to the duality function in the chosen argument,
/// evaluated at `(xi, zeta)` by enumerating every single-particle move
/// within the active box.
///
/// Sums are formed over unscaled falling factorials, which are exact in
/// `f64` for small instances; `N^{|xi|}` is conserved by the moves and is
/// divided out at the end.
pub fn migration_generator_apply(
    side: Side,
    xi: &Occupancy,
    zeta: &Occupancy,
    p: &ModelParams,
    t: &TruncationParams,
) -> f64 {
    let b = t.active_box(p.l);
    let mut x = dense(xi, b);
    let mut z = dense(zeta, b);
    let base = unscaled(&x, &z);
    let mut acc = 0.0;
    for idx in 0..b.len() {
        let site = b.site(idx);
        for to in [site - 1, site + 1] {
            if !b.contains(to) {
                continue;
            }
            let jdx = b.index(to);
            let mover = match side {
                Side::First => &mut x,
                Side::Second => &mut z,
            };
            let c = mover[idx];
            if c == 0 {
                continue;
            }
            mover[idx] -= 1;
            mover[jdx] += 1;
            let moved = unscaled(&x, &z);
            let mover = match side {
                Side::First => &mut x,
                Side::Second => &mut z,
            };
            mover[idx] += 1;
            mover[jdx] -= 1;
            acc += c as f64 * (moved - base);
        }
    }
    let order: i32 = x.iter().map(|&j| j as i32).sum();
    0.5 * p.m * acc / (p.n as f64).powi(order)
}

/// Transition matrix of the reflected walk on a box at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct RwKernel {
    pub sites: Vec<i64>,
    pub time: f64,
    /// Row-major generator: rate `m/2` to each in-box neighbour.
    pub generator: Vec<f64>,
    /// Row-major `exp(time Q)`.
    pub matrix: Vec<f64>,
}

impl RwKernel {
    /// Kernel of the walk with total attempt rate `m` on `n_sites`
    /// consecutive sites starting at `first`.
    pub fn on_sites(first: i64, n_sites: usize, m: f64, time: f64) -> Result<Self, DualityError> {
        if n_sites > MAX_KERNEL_SITES {
            return Err(DualityError::SizeLimit {
                sites: n_sites,
                limit: MAX_KERNEL_SITES,
            });
        }
        if !(time >= 0.0) || !(m >= 0.0) {
            return Err(DualityError::InvalidInput(
                "time and m must be non-negative".into(),
            ));
        }
        let n = n_sites;
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            for j in [i.wrapping_sub(1), i + 1] {
                if j < n {
                    q[i * n + j] = 0.5 * m;
                    q[i * n + i] -= 0.5 * m;
                }
            }
        }
        let matrix = expm(&q, n, time);
        Ok(Self {
            sites: (0..n as i64).map(|k| first + k).collect(),
            time,
            generator: q,
            matrix,
        })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    fn index(&self, site: i64) -> Option<usize> {
        let first = *self.sites.first()?;
        let k = site - first;
        (k >= 0 && (k as usize) < self.len()).then_some(k as usize)
    }

    /// `P_x(X(time) = y)`; out-of-box points are frozen, so the kernel is
    /// the identity there.
    pub fn prob(&self, x: i64, y: i64) -> f64 {
        match (self.index(x), self.index(y)) {
            (Some(i), Some(j)) => self.matrix[i * self.len() + j],
            _ => f64::from(u8::from(x == y)),
        }
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let (row_b, row_c) = (&b[k * n..(k + 1) * n], &mut c[i * n..(i + 1) * n]);
            for (cj, bj) in row_c.iter_mut().zip(row_b) {
                *cj += aik * bj;
            }
        }
    }
    c
}

const TAYLOR_ORDER: usize = 18;

/// `exp(time Q)` by scaling to norm at most 1/2, a fixed-order Taylor
/// polynomial, then repeated squaring.
fn expm(q: &[f64], n: usize, time: f64) -> Vec<f64> {
    let norm = (0..n)
        .map(|i| (0..n).map(|j| q[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
        * time;
    let mut squarings = 0u32;
    while norm / 2f64.powi(squarings as i32) > 0.5 {
        squarings += 1;
    }
    let scale = time / 2f64.powi(squarings as i32);
    let a: Vec<f64> = q.iter().map(|v| v * scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=TAYLOR_ORDER {
        term = matmul(&term, &a, n);
        let inv = 1.0 / k as f64;
        for (r, t) in result.iter_mut().zip(term.iter_mut()) {
            *t *= inv;
            *r += *t;
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result, n);
    }
    result
}

/// Kernel of `X^n` on the active box of `t` at `time`.
pub fn rw_kernel(
    p: &ModelParams,
    t: &TruncationParams,
    time: f64,
) -> Result<RwKernel, DualityError> {
    let b = t.active_box(p.l);
    RwKernel::on_sites(-b.half_width, b.len(), p.m, time)
}

/// Final per-site totals of `zeta^{n,kappa}` over `replicates` independent
/// runs; replicate `r` uses `seed_stream(master_seed, r)`.
pub fn zeta_samples(
    init: &Configuration,
    p: &ModelParams,
    t: &TruncationParams,
    kappa: Option<u64>,
    time: f64,
    replicates: u64,
    master_seed: u64,
) -> Result<Vec<Occupancy>, DualityError> {
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let traj = simulate_zeta(init, p, t, time, seed_stream(master_seed, r), kappa)?;
            Ok(occupancy(&traj.final_config))
        })
        .collect()
}

/// Monte-Carlo estimates of `E[D(xi, zeta^{n,kappa}(time))]` for every dual
/// configuration in `xis`, all evaluated on the same sample paths.
#[allow(clippy::too_many_arguments)]
pub fn correlation_mc(
    init: &Configuration,
    xis: &[Occupancy],
    p: &ModelParams,
    t: &TruncationParams,
    kappa: Option<u64>,
    time: f64,
    replicates: u64,
    master_seed: u64,
) -> Result<Vec<Estimate>, DualityError> {
    if replicates < 2 {
        return Err(DualityError::InvalidInput(
            "at least two replicates are needed".into(),
        ));
    }
    let samples = zeta_samples(init, p, t, kappa, time, replicates, master_seed)?;
    let sites: Vec<i64> = {
        let mut s: BTreeSet<i64> = xis.iter().flat_map(|x| x.keys().copied()).collect();
        s.extend(samples.iter().flat_map(|z| z.keys().copied()));
        s.into_iter().collect()
    };
    Ok(xis
        .iter()
        .map(|xi| {
            let mut acc = MeanAcc::new();
            for z in &samples {
                acc.push(duality_fn(xi, z, p.n, &sites));
            }
            acc.estimate()
        })
        .collect())
}

/// Both sides of the Green's-function identity at one site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreensReport {
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub diff: f64,
    /// `sqrt(se_lhs^2 + se_rhs^2)`.
    pub combined_se: f64,
    /// Standard error of the per-replicate differences.
    pub paired_se: f64,
}

impl GreensReport {
    /// `|diff|` in combined-SE units; 0 when both sides are deterministic
    /// and equal.
    pub fn z(&self) -> f64 {
        if self.diff == 0.0 {
            0.0
        } else {
            self.diff.abs() / self.combined_se
        }
    }
}

fn phi(c: &Configuration, site: i64, types: &BTreeSet<u32>) -> f64 {
    c.deme(site)
        .map_or(0.0, |d| types.iter().map(|&k| d.get(k) as f64).sum())
}

/// `L_r phi^{(y)}_I`: births of kept types in `I` minus deaths of types in `I`.
fn reaction_term(
    c: &Configuration,
    site: i64,
    types: &BTreeSet<u32>,
    p: &ModelParams,
    k_n: u32,
) -> f64 {
    let Some(d) = c.deme(site) else { return 0.0 };
    types
        .iter()
        .map(|&k| birth_rate(k, d, p, Some(k_n)) - death_rate(k, d, p))
        .sum()
}

/// Checks `E[sum_{k in I} eta^n_k(time, x)]` against the kernel-smoothed
/// initial data plus the time integral of the smoothed expected reaction
/// term, both estimated on the same `replicates` runs of `eta^n`. The time
/// integral is a trapezoidal rule over `grid_points` equally spaced times.
#[allow(clippy::too_many_arguments)]
pub fn greens_check(
    init: &Configuration,
    types: &BTreeSet<u32>,
    x: i64,
    p: &ModelParams,
    t: &TruncationParams,
    time: f64,
    replicates: u64,
    master_seed: u64,
    grid_points: usize,
) -> Result<GreensReport, DualityError> {
    let b = t.active_box(p.l);
    if !b.contains(x) {
        return Err(DualityError::InvalidInput(format!(
            "site {x} is outside the active box"
        )));
    }
    if grid_points < 2 || replicates < 2 || !(time >= 0.0) {
        return Err(DualityError::InvalidInput(
            "need grid_points >= 2, replicates >= 2, time >= 0".into(),
        ));
    }
    let grid: Vec<f64> = (0..grid_points)
        .map(|j| time * j as f64 / (grid_points - 1) as f64)
        .collect();
    let h = time / (grid_points - 1) as f64;
    // row x of P(time - t_j), restricted to the box
    let rows: Vec<Vec<f64>> = grid
        .iter()
        .map(|&tj| {
            let k = RwKernel::on_sites(-b.half_width, b.len(), p.m, (time - tj).max(0.0))?;
            Ok(b.sites().map(|y| k.prob(x, y)).collect())
        })
        .collect::<Result<_, DualityError>>()?;
    let smoothed_init: f64 = b
        .sites()
        .zip(&rows[0])
        .map(|(y, w)| w * phi(init, y, types))
        .sum();
    let samples: Vec<(f64, f64)> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let sim = Simulator::new(init, p, t, Dynamics::Eta, seed_stream(master_seed, r))?;
            let traj = sim.run(time, &grid)?;
            debug_assert_eq!(traj.snapshots.len(), grid_points);
            let mut integral = 0.0;
            for (j, snap) in traj.snapshots.iter().enumerate() {
                let w = if j == 0 || j + 1 == grid_points {
                    0.5 * h
                } else {
                    h
                };
                let smoothed: f64 = b
                    .sites()
                    .zip(&rows[j])
                    .filter(|(_, &pr)| pr != 0.0)
                    .map(|(y, pr)| pr * reaction_term(&snap.config, y, types, p, t.k_n))
                    .sum();
                integral += w * smoothed;
            }
            Ok((phi(&traj.final_config, x, types), smoothed_init + integral))
        })
        .collect::<Result<_, DualityError>>()?;
    let (mut l, mut r, mut d) = (MeanAcc::new(), MeanAcc::new(), MeanAcc::new());
    for &(a, c) in &samples {
        l.push(a);
        r.push(c);
        d.push(a - c);
    }
    let (lhs, rhs) = (l.estimate(), r.estimate());
    Ok(GreensReport {
        lhs,
        rhs,
        diff: lhs.mean - rhs.mean,
        combined_se: (lhs.se * lhs.se + rhs.se * rhs.se).sqrt(),
        paired_se: d.estimate().se,
    })
}

/// `e^{r (1 - log(r / alpha))}`, an upper bound on `P(Z_alpha >= r)`.
pub fn poisson_tail_bound(alpha: f64, r: f64) -> Result<f64, DualityError> {
    if !(alpha > 0.0) || !(r >= alpha) {
        return Err(DualityError::PreconditionViolated(format!(
            "need 0 < alpha <= r, got alpha = {alpha}, r = {r}"
        )));
    }
    Ok((r * (1.0 - (r / alpha).ln())).exp())
}

/// `P(Z_alpha >= r)` by direct summation of the upper tail.
pub fn poisson_tail_exact(alpha: f64, r: f64) -> f64 {
    let start = r.ceil().max(0.0) as u64;
    let log_pmf = |j: u64| -alpha + j as f64 * alpha.ln() - ln_factorial(j);
    let mut sum = 0.0;
    let mut j = start;
    loop {
        let term = log_pmf(j).exp();
        sum += term;
        if (j as f64 > alpha && term < sum * 1e-18) || j > start + 100_000 {
            break;
        }
        j += 1;
    }
    sum.min(1.0)
}

fn ln_factorial(j: u64) -> f64 {
    (1..=j).map(|i| (i as f64).ln()).sum()
}

/// `e^{-L distance}`, bounding `P(X(t) = y)` for `|y - x| = distance > e^2 m T / L`.
pub fn rw_tail_bound(l: f64, m: f64, horizon: f64, distance: f64) -> Result<f64, DualityError> {
    let threshold = std::f64::consts::E.powi(2) * m * horizon / l;
    if !(l > 0.0) || !(distance > threshold) {
        return Err(DualityError::PreconditionViolated(format!(
            "distance {distance} must exceed e^2 m T / L = {threshold}"
        )));
    }
    Ok((-l * distance).exp())
}

/// Fraction of `walks` continuous-time walks on `L^{-1} Z` (total rate `m`)
/// whose displacement at `horizon` is at least `distance`, optionally
/// reflected on `{-h, ..., h}` and started at site `start`.
#[allow(clippy::too_many_arguments)]
pub fn rw_exceedance_mc(
    l: f64,
    m: f64,
    horizon: f64,
    distance: f64,
    walks: u64,
    master_seed: u64,
    reflect_half_width: Option<i64>,
    start: i64,
) -> f64 {
    let hits: u64 = (0..walks)
        .into_par_iter()
        .map(|w| {
            let mut rng: SimRng = seed_stream(master_seed, w).rng();
            let mut pos = start;
            let mut clock = 0.0;
            loop {
                clock += rng.exponential(m);
                if clock > horizon {
                    break;
                }
                let to = if rng.bernoulli(0.5) { pos + 1 } else { pos - 1 };
                if reflect_half_width.is_none_or(|h| to.abs() <= h) {
                    pos = to;
                }
            }
            u64::from(((pos - start).abs() as f64) / l >= distance)
        })
        .sum();
    hits as f64 / walks as f64
}
