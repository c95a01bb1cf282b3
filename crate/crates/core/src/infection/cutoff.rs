//! The high-density threshold `U_eps` and the consequences it guarantees.

use super::state::{coupling_rates, CouplingState};
use super::InfectionError;
use crate::model::{ModelParams, Polynomial};

pub const DEFAULT_STEPS_PER_UNIT: u32 = 10;

const SAMPLES: usize = 20_000;

/// Largest `x >= 0` with `f(x) > 0` up to the root bound of `f`, refined by
/// bisection; 0 when `f <= 0` everywhere sampled.
fn last_positive(f: &Polynomial) -> f64 {
    let hi = f.root_bound().max(1.0) * 1.01;
    let step = hi / SAMPLES as f64;
    let mut last = None;
    for j in 0..=SAMPLES {
        let x = j as f64 * step;
        if f.eval(x) > 0.0 {
            last = Some(x);
        }
    }
    let Some(mut lo) = last else { return 0.0 };
    let mut up = lo + step;
    for _ in 0..200 {
        let mid = 0.5 * (lo + up);
        if f.eval(mid) > 0.0 {
            lo = mid;
        } else {
            up = mid;
        }
    }
    up
}

fn neg(p: &Polynomial) -> Polynomial {
    Polynomial::new(p.coeffs().iter().map(|c| -c).collect())
}

fn sample_max(f: &Polynomial, hi: f64) -> f64 {
    (0..=SAMPLES)
        .map(|j| f.eval(hi * j as f64 / SAMPLES as f64))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest grid value `U > 1` (grid spacing `1 / steps_per_unit`) such that
/// (i) `q_+`, `q_-`, `q_+'` are non-negative and non-decreasing on `[U, inf)`;
/// (ii) each of them is at least its maximum over `[0, U]` at `U`;
/// (iii) `(q_+(V) + V q_+'(V)) / q_-(V) <= eps` for all `V >= U`.
pub fn compute_u_eps(
    p: &ModelParams,
    eps: f64,
    steps_per_unit: u32,
) -> Result<f64, InfectionError> {
    if !(eps > 0.0) || steps_per_unit == 0 {
        return Err(InfectionError::InvalidInput(
            "eps and steps_per_unit must be positive".into(),
        ));
    }
    let (qp, qm) = (&p.q_plus, &p.q_minus);
    match (qp.degree(), qm.degree()) {
        (_, None) => {
            return Err(InfectionError::NoSuchU(
                "q_minus vanishes identically".into(),
            ))
        }
        (Some(dp), Some(dm)) if dp >= dm => {
            return Err(InfectionError::NoSuchU(format!(
                "deg q_plus = {dp} >= deg q_minus = {dm}"
            )))
        }
        _ => {}
    }
    let dqp = qp.derivative();
    let monotone = [
        qp.clone(),
        qm.clone(),
        dqp.clone(),
        qm.derivative(),
        dqp.derivative(),
    ];
    // (i): beyond the last point where any of them is negative
    let mut lower = monotone
        .iter()
        .map(|f| last_positive(&neg(f)))
        .fold(0.0, f64::max);
    // q_- must be strictly positive for the ratio in (iii)
    lower = lower.max(last_positive(&neg(qm)));
    // (iii): h - eps q_- <= 0 with h = (V q_+)'
    let mut vq = vec![0.0];
    vq.extend_from_slice(qp.coeffs());
    let h = Polynomial::new(vq).derivative();
    let w_coeffs: Vec<f64> = (0..h.coeffs().len().max(qm.coeffs().len()))
        .map(|i| {
            h.coeffs().get(i).copied().unwrap_or(0.0)
                - eps * qm.coeffs().get(i).copied().unwrap_or(0.0)
        })
        .collect();
    let w = Polynomial::new(w_coeffs);
    lower = lower.max(last_positive(&w));
    // (ii): values at U dominate the maxima over [0, lower]
    let maxima: Vec<(Polynomial, f64)> = [qp, &dqp, qm]
        .into_iter()
        .map(|f| (f.clone(), sample_max(f, lower.max(1.0))))
        .collect();
    let steps = steps_per_unit as f64;
    let tol = 1e-9 * lower.max(1.0);
    let mut j = ((lower - tol) * steps).floor().max(0.0) as u64;
    let limit = j + 1_000_000;
    while j < limit {
        let u = j as f64 / steps;
        j += 1;
        if u <= 1.0 || u < lower - tol {
            continue;
        }
        let qm_u = qm.eval(u);
        if qm_u <= 0.0 || w.eval(u) > 0.0 {
            continue;
        }
        if monotone.iter().any(|f| f.eval(u) < 0.0) {
            continue;
        }
        if maxima
            .iter()
            .all(|(f, m)| f.eval(u) >= *m - 1e-12 * m.abs().max(1.0))
        {
            return Ok(u);
        }
    }
    Err(InfectionError::NoSuchU("grid search exhausted".into()))
}

/// Rates checked by the guard at one deme.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardReport {
    pub site: i64,
    pub marginal_totals: [u64; 2],
    /// Per-particle cross-class rates `[j-1]` for `j = 1, 2`.
    pub transmit_cross: [f64; 2],
    pub partial_cross: [f64; 2],
    pub induce_cross: [f64; 2],
    /// Worst-case (type 0) ratio bounds for each high-density side; `None`
    /// for a side below the threshold.
    pub generation_ratio: [Option<f64>; 2],
    pub birth_ratio: [Option<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub enum GuardOutcome {
    NotApplicable,
    Checked(GuardReport),
}

/// At a deme where some marginal holds at least `N U_eps` particles, checks
/// that every cross-class transmission, partial-death and induction rate is
/// exactly zero and that the generation ratios are at most `eps`.
pub fn high_density_guard_check(
    state: &CouplingState,
    site: i64,
    eps: f64,
    u_eps: f64,
) -> Result<GuardOutcome, InfectionError> {
    let Some(r) = coupling_rates(state, site) else {
        return Ok(GuardOutcome::NotApplicable);
    };
    let threshold = state.params().n as f64 * u_eps;
    let high = [r.n[0] as f64 >= threshold, r.n[1] as f64 >= threshold];
    if !high[0] && !high[1] {
        return Ok(GuardOutcome::NotApplicable);
    }
    let fail = |msg: String| InfectionError::GuardViolation {
        time: state.clock(),
        site,
        msg,
    };
    let mut report = GuardReport {
        site,
        marginal_totals: r.n,
        transmit_cross: [0.0; 2],
        partial_cross: [0.0; 2],
        induce_cross: [0.0; 2],
        generation_ratio: [None; 2],
        birth_ratio: [None; 2],
    };
    for j in 0..2 {
        report.transmit_cross[j] = r.delta_transmit[j][1 - j];
        report.partial_cross[j] = r.delta_partial[j][1 - j];
        report.induce_cross[j] = r.beta_induce[j][1 - j];
        if report.transmit_cross[j] != 0.0
            || report.partial_cross[j] != 0.0
            || report.induce_cross[j] != 0.0
        {
            return Err(fail(format!("non-zero cross-class rate for j = {}", j + 1)));
        }
    }
    for (i, _) in high.iter().enumerate().filter(|(_, &h)| h) {
        // s_0 = 1 maximises both ratios over k
        let beta = r.beta_infected[i];
        let gen = beta + r.beta_induce[i][i];
        let g = gen / (gen + r.delta_infected[i] + r.delta_transmit[i][i]);
        let b = beta / (beta + r.delta_min + r.delta_partial[i][i]);
        report.generation_ratio[i] = Some(g);
        report.birth_ratio[i] = Some(b);
        if g > eps || b > eps {
            return Err(fail(format!(
                "ratio bound exceeded on side {}: {g} / {b} > {eps}",
                i + 1
            )));
        }
    }
    Ok(GuardOutcome::Checked(report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infection::init_coupling;
    use crate::model::{Configuration, TruncationParams};

    #[test]
    fn fisher_kpp_threshold() {
        let p = ModelParams::fisher_kpp(1.0, 1.0, 1, 0.0, 0.5);
        assert_eq!(compute_u_eps(&p, 0.1, 1).unwrap(), 10.0);
        assert_eq!(compute_u_eps(&p, 0.1, 10).unwrap(), 10.0);
        assert_eq!(compute_u_eps(&p, 1e6, 10).unwrap(), 1.1);
    }

    #[test]
    fn quadratic_threshold() {
        let mut p = ModelParams::fisher_kpp(1.0, 1.0, 1, 0.0, 0.5);
        p.q_plus = Polynomial::new(vec![1.0, 1.0]);
        p.q_minus = Polynomial::new(vec![0.0, 0.0, 1.0]);
        assert_eq!(compute_u_eps(&p, 1.0, 10).unwrap(), 2.5);
    }

    #[test]
    fn non_monotone_death_pushes_threshold() {
        // q_- = (u - 3)^2 u dips then rises; monotone only beyond 3
        let mut p = ModelParams::fisher_kpp(1.0, 1.0, 1, 0.0, 0.5);
        p.q_minus = Polynomial::new(vec![0.0, 9.0, -6.0, 1.0]);
        let u = compute_u_eps(&p, 10.0, 10).unwrap();
        assert!(u >= 3.0);
        assert!(p.q_minus.eval(u) >= p.q_minus.eval(1.0));
    }

    #[test]
    fn guard_at_occupancy_twenty() {
        let p = ModelParams::fisher_kpp(1.0, 1.0, 1, 0.0, 0.5);
        let mut a = Configuration::new();
        a.add(0, 0, 20);
        let mut b = Configuration::new();
        b.add(0, 0, 18);
        let s = init_coupling(&a, &b, &p, &TruncationParams::new(0.5, 3), false);
        let u = compute_u_eps(&p, 0.1, 10).unwrap();
        match high_density_guard_check(&s, 0, 0.1, u).unwrap() {
            GuardOutcome::Checked(r) => {
                assert_eq!(r.transmit_cross, [0.0; 2]);
                assert_eq!(r.partial_cross, [0.0; 2]);
                assert_eq!(r.induce_cross, [0.0; 2]);
                assert!(r.generation_ratio[0].unwrap() <= 0.1);
                assert!(r.birth_ratio[0].unwrap() <= 0.1);
                assert!(r.generation_ratio[1].unwrap() <= 0.1);
            }
            GuardOutcome::NotApplicable => panic!("deme is above threshold"),
        }
        let mut small = Configuration::new();
        small.add(0, 0, 3);
        let s = init_coupling(
            &small,
            &Configuration::new(),
            &p,
            &TruncationParams::new(0.5, 3),
            false,
        );
        assert_eq!(
            high_density_guard_check(&s, 0, 0.1, u).unwrap(),
            GuardOutcome::NotApplicable
        );
    }
}
