mod common;

use proptest::prelude::*;
use spatial_ratchet::engine::{simulate_eta_n, Trajectory};
use spatial_ratchet::stats::{
    click_times, moment_estimate, truncation_convergence, MeanAcc, MomentAccumulator,
};
use spatial_ratchet::{seed_stream, Configuration, ModelParams, Polynomial, TruncationParams};

fn runs(
    init: &Configuration,
    p: &ModelParams,
    t: &TruncationParams,
    horizon: f64,
    n: u64,
    seed: u64,
) -> Vec<Trajectory> {
    (0..n)
        .map(|r| simulate_eta_n(init, p, t, horizon, seed_stream(seed, r)).unwrap())
        .collect()
}

#[test]
fn first_moment_matches_master_equation() {
    let p = ModelParams::fisher_kpp(1.0, 0.0, 1, 0.0, 0.5);
    let t = TruncationParams::new(0.5, 1);
    let init = common::single_site(1);
    let rs = runs(&init, &p, &t, 1.5, 4000, 40);
    let rep = moment_estimate(&rs, &[1, 2], &[0], 1.0).unwrap();
    let law = common::master_equation(|n| n as f64, |n| (n * n) as f64, 1, 50, 1.0, 4000);
    let m1 = common::mean_of(&law);
    let m2: f64 = law
        .iter()
        .enumerate()
        .map(|(n, q)| (n * n) as f64 * q)
        .sum();
    for (row, exact) in rep.rows.iter().zip([m1, m2]) {
        assert!(
            (row.estimate.mean - exact).abs() <= 3.0 * row.estimate.se,
            "{row:?} vs {exact}"
        );
    }
    // sup_x ||eta_0(x)|| = 1 and N = 1
    assert!((rep.normalized_ratio[&1] - rep.sup_mean[&1] / 2.0).abs() < 1e-15);
}

#[test]
fn clicks_never_exceed_deaths() {
    let p = ModelParams::fisher_kpp(1.0, 1.0, 1, 0.5, 0.5);
    let t = TruncationParams::new(1.0, 6);
    let init = Configuration::uniform(2, 1);
    for tr in runs(&init, &p, &t, 3.0, 100, 41) {
        let rec = click_times(&tr);
        let deaths = tr
            .events
            .iter()
            .filter(|e| matches!(e.kind, spatial_ratchet::engine::EventKind::Death { .. }))
            .count();
        assert!(rec.clicks.len() <= deaths);
        assert!(rec
            .clicks
            .windows(2)
            .all(|w| w[0].time < w[1].time && w[0].to <= w[1].from));
    }
}

#[test]
fn frozen_window_is_identical_across_levels() {
    let mut p = ModelParams::fisher_kpp(1.0, 0.0, 1, 0.0, 0.5);
    p.q_plus = Polynomial::zero();
    p.q_minus = Polynomial::zero();
    let init = Configuration::uniform(2, 1);
    let schedule = [
        TruncationParams::new(2.0, 1),
        TruncationParams::new(4.0, 2),
        TruncationParams::new(8.0, 4),
    ];
    let table = truncation_convergence(&init, &p, &schedule, 1, 1.0, 20, 42, 3.0).unwrap();
    assert!(table.converged);
    assert!(table.diffs.iter().all(|d| d.max_z == 0.0));
}

#[test]
fn low_cutoff_is_flagged() {
    // type-3 particles cannot reproduce at K = 1 but can at K = 4
    let p = ModelParams::fisher_kpp(1.0, 0.0, 1, 0.0, 1.0);
    let mut init = Configuration::new();
    init.add(0, 3, 2);
    let mut q = p.clone();
    q.fitness = spatial_ratchet::FitnessSpec::Explicit(vec![1.0; 8]);
    let schedule = [TruncationParams::new(1.0, 1), TruncationParams::new(2.0, 4)];
    let table = truncation_convergence(&init, &q, &schedule, 0, 2.0, 400, 43, 3.0).unwrap();
    assert!(!table.converged, "{table:?}");
}

#[test]
fn fisher_kpp_levels_settle() {
    let p = ModelParams::fisher_kpp(1.0, 1.0, 2, 0.1, 0.3);
    let init = Configuration::uniform(2, 1);
    let schedule = [
        TruncationParams::new(2.0, 2),
        TruncationParams::new(4.0, 4),
        TruncationParams::new(8.0, 8),
    ];
    let table = truncation_convergence(&init, &p, &schedule, 1, 0.5, 1500, 44, 3.0).unwrap();
    assert!(table.converged, "{table:?}");
    assert!(table.to_csv().lines().count() == 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_accumulators_equal_pooled(xs in proptest::collection::vec(0.0f64..100.0, 2..60), split in 0usize..60) {
        let split = split.min(xs.len());
        let mut pooled = MeanAcc::new();
        xs.iter().for_each(|&x| pooled.push(x));
        let (mut a, mut b) = (MeanAcc::new(), MeanAcc::new());
        xs[..split].iter().for_each(|&x| a.push(x));
        xs[split..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        prop_assert_eq!(a.count(), pooled.count());
        prop_assert!((a.mean() - pooled.mean()).abs() <= 1e-9 * pooled.mean().abs().max(1.0));
        prop_assert!((a.variance() - pooled.variance()).abs() <= 1e-9 * pooled.variance().max(1.0));
    }

    #[test]
    fn merged_moment_reports_equal_pooled(split in 1usize..9, seed in 0u64..1000) {
        let p = ModelParams::fisher_kpp(1.0, 1.0, 1, 0.2, 0.3);
        let t = TruncationParams::new(1.0, 3);
        let rs = runs(&Configuration::uniform(2, 1), &p, &t, 0.5, 10, seed);
        let pooled = moment_estimate(&rs, &[1, 2], &[-1, 0, 1], 0.5).unwrap();
        let mut a = MomentAccumulator::new(0.5, 1, &[-1, 0, 1], &[1, 2]);
        let mut b = a.clone();
        for r in &rs[..split] { a.push_config(&r.initial, &r.final_config); }
        for r in &rs[split..] { b.push_config(&r.initial, &r.final_config); }
        a.merge(&b);
        let merged = a.finish();
        for (x, y) in merged.rows.iter().zip(&pooled.rows) {
            prop_assert!((x.estimate.mean - y.estimate.mean).abs() < 1e-9);
            prop_assert!((x.estimate.se - y.estimate.se).abs() < 1e-9);
        }
    }
}
