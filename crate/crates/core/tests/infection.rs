mod common;

use spatial_ratchet::engine::simulate_eta_n;
use spatial_ratchet::infection::{
    compute_u_eps, high_density_guard_check, init_coupling, simulate_coupling, CouplingOptions,
    GuardOutcome,
};
use spatial_ratchet::stats::difference_mass;
use spatial_ratchet::{seed_stream, Configuration, ModelParams, TruncationParams};

fn pair() -> (Configuration, Configuration) {
    let mut a = Configuration::new();
    a.add(-1, 0, 2);
    a.add(0, 0, 3);
    a.add(1, 1, 1);
    let mut b = Configuration::new();
    b.add(0, 0, 1);
    b.add(0, 1, 2);
    b.add(1, 0, 2);
    (a, b)
}

#[test]
fn coupling_marginals_match_direct_simulation() {
    let p = ModelParams::fisher_kpp(1.0, 1.0, 2, 0.2, 0.3);
    let t = TruncationParams::new(1.0, 3);
    let (a, b) = pair();
    let reps = 1500u64;
    let opts = CouplingOptions::default();
    let coupled: Vec<[Configuration; 2]> = (0..reps)
        .map(|r| {
            simulate_coupling(&a, &b, &p, &t, 0.8, &opts, seed_stream(30, r))
                .unwrap()
                .0
                .final_marginal
        })
        .collect();
    for (side, init) in [(0usize, &a), (1, &b)] {
        let direct: Vec<Configuration> = (0..reps)
            .map(|r| {
                simulate_eta_n(init, &p, &t, 0.8, seed_stream(31 + side as u64, r))
                    .unwrap()
                    .final_config
            })
            .collect();
        for site in [None, Some(-1), Some(0), Some(1)] {
            let stat = |c: &Configuration| match site {
                None => c.total_mass() as f64,
                Some(s) => c.total_at(s) as f64,
            };
            let x: Vec<f64> = coupled.iter().map(|m| stat(&m[side])).collect();
            let y: Vec<f64> = direct.iter().map(stat).collect();
            let ((mx, sx), (my, sy)) = (common::mean_se(&x), common::mean_se(&y));
            assert!(
                (mx - my).abs() <= 3.0 * (sx * sx + sy * sy).sqrt(),
                "side {side} site {site:?}: {mx} vs {my}"
            );
        }
    }
}

#[test]
fn initial_difference_mass() {
    let mut a = Configuration::new();
    a.add(0, 0, 3);
    let mut b = Configuration::new();
    b.add(0, 0, 1);
    b.add(0, 1, 1);
    let p = ModelParams::fisher_kpp(1.0, 1.0, 1, 0.1, 0.3);
    let s = init_coupling(&a, &b, &p, &TruncationParams::new(1.0, 3), true);
    assert_eq!(s.tracked_count() as u64, difference_mass(&a, &b).delta0);
    assert_eq!(s.diff_mass(), 3);
}

#[test]
fn guard_never_fires_in_crowded_runs() {
    let p = ModelParams::fisher_kpp(1.0, 1.0, 1, 0.1, 0.3);
    let u = compute_u_eps(&p, 0.1, 10).unwrap();
    assert_eq!(u, 10.0);
    let mut a = Configuration::uniform(14, 1);
    let mut b = Configuration::uniform(12, 1);
    a.add(0, 1, 3);
    b.add(1, 2, 2);
    let t = TruncationParams::new(1.0, 4);
    let opts = CouplingOptions {
        guard: true,
        labels: true,
        ..Default::default()
    };
    let mut checks = 0;
    for r in 0..50 {
        let (traj, _) = simulate_coupling(&a, &b, &p, &t, 0.5, &opts, seed_stream(33, r)).unwrap();
        checks += traj.guard_checks;
    }
    assert!(checks > 0);
    let s = init_coupling(&a, &b, &p, &t, false);
    assert!(matches!(
        high_density_guard_check(&s, 0, 0.1, u).unwrap(),
        GuardOutcome::Checked(_)
    ));
}

#[test]
fn identical_configurations_never_hit() {
    let p = ModelParams::fisher_kpp(1.0, 1.0, 2, 0.2, 0.3);
    let t = TruncationParams::new(3.0, 3);
    let a = Configuration::uniform(2, 3);
    for r in 0..50 {
        let (_, rep) = simulate_coupling(
            &a,
            &a,
            &p,
            &t,
            1.0,
            &CouplingOptions::default(),
            seed_stream(34, r),
        )
        .unwrap();
        assert!(!rep.hit);
        assert_eq!(rep.final_diff_mass, 0);
    }
}
