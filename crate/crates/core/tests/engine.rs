mod common;

use proptest::prelude::*;
use spatial_ratchet::engine::{
    replay_checked, simulate_domination_pair, simulate_eta_n, simulate_zeta, Dynamics, EventKind,
    Simulator, Trajectory,
};
use spatial_ratchet::rates::{deme_rate_vector, total_rate_bound};
use spatial_ratchet::{
    seed_stream, Configuration, DemeState, ModelParams, Polynomial, TruncationParams,
};

fn spread_init() -> Configuration {
    let mut c = Configuration::uniform(2, 3);
    c.add(0, 2, 1);
    c.add(5, 1, 2);
    c.add(-7, 0, 1);
    c
}

#[test]
fn exterior_frozen_and_cutoff_respected() {
    let p = ModelParams::fisher_kpp(1.0, 1.5, 2, 0.4, 0.3);
    let t = TruncationParams::new(3.0, 2);
    let init = spread_init();
    for r in 0..200 {
        let traj = simulate_eta_n(&init, &p, &t, 1.0, seed_stream(10, r)).unwrap();
        for ev in &traj.events {
            assert!(ev.site.abs() <= 3);
            if let Some(to) = ev.target_site() {
                assert!(to.abs() <= 3);
            }
            if let EventKind::Birth { offspring, .. } = ev.kind {
                assert!(offspring <= 2);
            }
        }
        for (site, d) in traj.final_config.iter().filter(|(s, _)| s.abs() > 3) {
            assert_eq!(Some(d), init.deme(site));
        }
        assert_eq!(replay_checked(&traj).unwrap(), traj.final_config);
    }
}

#[test]
fn kappa_cap_respected() {
    let p = ModelParams::fisher_kpp(1.0, 0.5, 2, 0.0, 0.3);
    let t = TruncationParams::new(1.0, 1);
    let init = Configuration::uniform(5, 1);
    for r in 0..200 {
        let traj = simulate_zeta(&init, &p, &t, 1.0, seed_stream(11, r), Some(2)).unwrap();
        for ev in &traj.events {
            if let EventKind::Birth { .. } = ev.kind {
                // the parent deme held at most N kappa = 4 before the birth
                assert!(ev.deme_total <= 5, "{ev:?}");
            }
        }
    }
}

#[test]
fn migration_only_conserves_particles() {
    let mut p = ModelParams::fisher_kpp(1.0, 2.0, 1, 0.3, 0.3);
    p.q_plus = Polynomial::zero();
    p.q_minus = Polynomial::zero();
    let t = TruncationParams::new(2.0, 3);
    let init = spread_init();
    for r in 0..100 {
        let traj = simulate_eta_n(&init, &p, &t, 2.0, seed_stream(12, r)).unwrap();
        assert!(traj.events.iter().all(|e| matches!(
            e.kind,
            EventKind::MigrateLeft { .. } | EventKind::MigrateRight { .. }
        )));
        assert_eq!(traj.final_config.total_mass(), init.total_mass());
        for k in 0..3 {
            let count = |c: &Configuration| c.iter().map(|(_, d)| d.get(k)).sum::<u64>();
            assert_eq!(count(&traj.final_config), count(&init));
        }
    }
}

#[test]
fn domination_holds_on_every_event() {
    let p = ModelParams::fisher_kpp(1.0, 1.0, 2, 0.2, 0.3);
    let t = TruncationParams::new(2.0, 4);
    let init = Configuration::uniform(2, 2);
    for r in 0..100 {
        let run = simulate_domination_pair(&init, &p, &t, 2.0, seed_stream(13, r)).unwrap();
        assert!(run.checks > 0);
        assert_eq!(replay_checked(&run.eta).unwrap(), run.eta.final_config);
        assert_eq!(replay_checked(&run.zeta).unwrap(), run.zeta.final_config);
    }
}

#[test]
fn single_deme_mean_matches_master_equation() {
    let p = ModelParams::fisher_kpp(1.0, 0.0, 1, 0.0, 0.5);
    let t = TruncationParams::new(0.5, 1);
    let init = common::single_site(3);
    let law = common::master_equation(|n| n as f64, |n| (n * n) as f64, 3, 50, 1.0, 4000);
    let xs: Vec<f64> = (0..4000)
        .map(|r| {
            simulate_eta_n(&init, &p, &t, 1.0, seed_stream(14, r))
                .unwrap()
                .final_config
                .total_at(0) as f64
        })
        .collect();
    let (mean, se) = common::mean_se(&xs);
    let exact = common::mean_of(&law);
    assert!((mean - exact).abs() <= 3.0 * se, "{mean} ± {se} vs {exact}");
}

#[test]
fn trajectory_files_are_deterministic() {
    let p = ModelParams::fisher_kpp(1.0, 1.0, 2, 0.3, 0.3);
    let t = TruncationParams::new(2.0, 3);
    let a = Simulator::new(&spread_init(), &p, &t, Dynamics::Eta, seed_stream(42, 3))
        .unwrap()
        .run(1.0, &[0.5])
        .unwrap();
    let b = Simulator::new(&spread_init(), &p, &t, Dynamics::Eta, seed_stream(42, 3))
        .unwrap()
        .run(1.0, &[0.5])
        .unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(Trajectory::from_bytes(&a.to_bytes()).unwrap(), a);
    let c = Simulator::new(&spread_init(), &p, &t, Dynamics::Eta, seed_stream(42, 4))
        .unwrap()
        .run(1.0, &[0.5])
        .unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
}

proptest! {
    #[test]
    fn reaction_rates_below_bound(
        counts in proptest::collection::vec(0u64..30, 1..6),
        n in 1u64..5,
        mu in 0.0f64..1.0,
        s in 0.01f64..1.0,
        b in 0.0f64..3.0,
        k_n in 0u32..6,
    ) {
        let p = ModelParams::cooperative(1.0, 1.0, n, mu, s, b);
        let d = DemeState::from_counts(counts.iter().enumerate().map(|(k, &c)| (k as u32, c)));
        let v = deme_rate_vector(&d, &p, &TruncationParams::new(1.0, k_n));
        let bound = total_rate_bound(d.total() as f64, &p);
        prop_assert!(v.total <= bound * (1.0 + 1e-12) + 1e-12, "{} > {}", v.total, bound);
    }
}
