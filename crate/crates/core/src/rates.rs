//! Reaction rates of a single deme.

use std::collections::BTreeMap;

use crate::model::{DemeState, ModelParams, Polynomial, TruncationParams};

/// `poly(u / N)`.
pub fn q_scaled(poly: &Polynomial, n: u64, u: f64) -> f64 {
    poly.eval(u / n as f64)
}

/// `F^b_k(u)`: the rate at which type-`k` offspring appear in deme `u`.
/// Zero for `k > cutoff` when a cutoff is supplied.
pub fn birth_rate(k: u32, u: &DemeState, p: &ModelParams, cutoff: Option<u32>) -> f64 {
    if cutoff.is_some_and(|c| k > c) {
        return 0.0;
    }
    let mut r = p.fitness.eval(k) * (1.0 - p.mu) * u.get(k) as f64;
    if k >= 1 {
        r += p.fitness.eval(k - 1) * p.mu * u.get(k - 1) as f64;
    }
    if r == 0.0 {
        return 0.0;
    }
    r * q_scaled(&p.q_plus, p.n, u.total() as f64)
}

/// `F^d_k(u) = u_k q_-^N(||u||)`.
pub fn death_rate(k: u32, u: &DemeState, p: &ModelParams) -> f64 {
    let c = u.get(k);
    if c == 0 {
        return 0.0;
    }
    c as f64 * q_scaled(&p.q_minus, p.n, u.total() as f64)
}

/// `u (q_+^N(u) + q_-^N(u))`.
pub fn total_rate_bound(u_total: f64, p: &ModelParams) -> f64 {
    u_total * (q_scaled(&p.q_plus, p.n, u_total) + q_scaled(&p.q_minus, p.n, u_total))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateVector {
    pub births: BTreeMap<u32, f64>,
    pub deaths: BTreeMap<u32, f64>,
    pub total: f64,
}

/// All non-zero reaction rates of deme `u` under the truncation `t`.
pub fn deme_rate_vector(u: &DemeState, p: &ModelParams, t: &TruncationParams) -> RateVector {
    let mut v = RateVector::default();
    for (k, _) in u.iter() {
        for kk in [k, k + 1] {
            if kk > t.k_n || v.births.contains_key(&kk) {
                continue;
            }
            let b = birth_rate(kk, u, p, Some(t.k_n));
            if b > 0.0 {
                v.births.insert(kk, b);
            }
        }
        let d = death_rate(k, u, p);
        if d > 0.0 {
            v.deaths.insert(k, d);
        }
    }
    v.total = v.births.values().sum::<f64>() + v.deaths.values().sum::<f64>();
    v
}

/// Parent-level reproduction rate of the truncated process: every particle of
/// type `k <= K_n` reproduces at `s_k q_+^N(||u||)`; the offspring is mutated
/// with probability `mu` and discarded when its type would exceed `K_n`.
/// Returns `(parent_rate, kept_rate)` where `kept_rate` excludes discarded
/// offspring.
pub fn parent_level_birth(u: &DemeState, p: &ModelParams, k_n: u32) -> (f64, f64) {
    let q = q_scaled(&p.q_plus, p.n, u.total() as f64);
    let mut parent = 0.0;
    let mut kept = 0.0;
    for (k, c) in u.iter().filter(|&(k, _)| k <= k_n) {
        let r = p.fitness.eval(k) * c as f64 * q;
        parent += r;
        kept += if k == k_n { r * (1.0 - p.mu) } else { r };
    }
    (parent, kept)
}
