mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use spatial_ratchet::duality::{
    correlation_mc, duality_fn, greens_check, migration_generator_apply, poisson_poly,
    poisson_tail_bound, poisson_tail_exact, rw_exceedance_mc, rw_kernel, rw_tail_bound,
    zeta_samples, Occupancy, Side,
};
use spatial_ratchet::{Configuration, ModelParams, Polynomial, TruncationParams};

fn occupancy_strategy(half_width: i64, max_particles: u64) -> impl Strategy<Value = Occupancy> {
    proptest::collection::vec((-half_width..=half_width, 1..=max_particles), 0..4).prop_map(
        move |v| {
            let mut o = Occupancy::new();
            let mut left = max_particles;
            for (s, c) in v {
                let c = c.min(left);
                if c > 0 {
                    *o.entry(s).or_default() += c;
                    left -= c;
                }
            }
            o
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn migration_generator_is_symmetric(
        hw in 0i64..=2,
        n in 1u64..4,
        m in 0.1f64..3.0,
        xi in occupancy_strategy(2, 4),
        zeta in occupancy_strategy(2, 4),
    ) {
        let p = ModelParams::fisher_kpp(1.0, m, n, 0.0, 0.5);
        let t = TruncationParams::new(hw as f64, 2);
        let clip = |o: &Occupancy| o.iter().filter(|(s, _)| s.abs() <= hw).map(|(&s, &c)| (s, c)).collect::<Occupancy>();
        let (xi, zeta) = (clip(&xi), clip(&zeta));
        let a = migration_generator_apply(Side::First, &xi, &zeta, &p, &t);
        let b = migration_generator_apply(Side::Second, &xi, &zeta, &p, &t);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300), "{a} vs {b}");
    }

    #[test]
    fn falling_factorial_below_power(n in 1u64..5, xi in occupancy_strategy(2, 5), zeta in occupancy_strategy(2, 8)) {
        let sites: Vec<i64> = (-2..=2).collect();
        let d = duality_fn(&xi, &zeta, n, &sites);
        let bound: f64 = sites
            .iter()
            .map(|s| {
                let j = xi.get(s).copied().unwrap_or(0) as i32;
                (zeta.get(s).copied().unwrap_or(0) as f64 / n as f64).powi(j)
            })
            .product();
        prop_assert!(d >= 0.0 && d <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn poisson_poly_first_order(n in 1u64..10, i in 0i64..100, j in 1i64..6) {
        prop_assert!((poisson_poly(n, 1, i) - i as f64 / n as f64).abs() < 1e-12);
        if i < j {
            prop_assert_eq!(poisson_poly(n, j, i), 0.0);
        }
    }
}

#[test]
fn correlation_single_dual_particle_is_scaled_mean() {
    let p = ModelParams::fisher_kpp(1.0, 1.0, 2, 0.0, 0.5);
    let t = TruncationParams::new(1.0, 2);
    let init = Configuration::uniform(2, 1);
    let xi: Occupancy = [(0, 1)].into_iter().collect();
    let est = correlation_mc(&init, &[xi], &p, &t, Some(10), 0.7, 300, 4).unwrap();
    let samples = zeta_samples(&init, &p, &t, Some(10), 0.7, 300, 4).unwrap();
    let direct = samples
        .iter()
        .map(|z| z.get(&0).copied().unwrap_or(0) as f64 / 2.0)
        .sum::<f64>()
        / 300.0;
    assert!((est[0].mean - direct).abs() < 1e-12);
}

#[test]
fn correlation_matches_master_equation() {
    // single deme, N = 2, kappa = 3: births at rate n while n <= 6, deaths n * n/2
    let p = ModelParams::fisher_kpp(1.0, 0.0, 2, 0.0, 0.5);
    let t = TruncationParams::new(0.5, 1);
    let init = common::single_site(3);
    let law = common::master_equation(
        |n| if n <= 6 { n as f64 } else { 0.0 },
        |n| n as f64 * n as f64 / 2.0,
        3,
        50,
        1.0,
        4000,
    );
    let second: f64 = law
        .iter()
        .enumerate()
        .map(|(n, q)| (n * n.saturating_sub(1)) as f64 / 4.0 * q)
        .sum();
    let xis: Vec<Occupancy> = vec![
        [(0, 1)].into_iter().collect(),
        [(0, 2)].into_iter().collect(),
    ];
    let est = correlation_mc(&init, &xis, &p, &t, Some(3), 1.0, 4000, 11).unwrap();
    let first = common::mean_of(&law) / 2.0;
    assert!(
        (est[0].mean - first).abs() <= 3.0 * est[0].se,
        "{:?} vs {first}",
        est[0]
    );
    assert!(
        (est[1].mean - second).abs() <= 3.0 * est[1].se,
        "{:?} vs {second}",
        est[1]
    );
}

#[test]
fn greens_pure_migration_matches_kernel() {
    let mut p = ModelParams::fisher_kpp(1.0, 1.5, 1, 0.0, 0.5);
    p.q_plus = Polynomial::zero();
    p.q_minus = Polynomial::zero();
    let t = TruncationParams::new(2.0, 3);
    let mut init = Configuration::new();
    init.add(-2, 0, 4);
    init.add(1, 0, 2);
    let types: BTreeSet<u32> = [0].into_iter().collect();
    let k = rw_kernel(&p, &t, 1.0).unwrap();
    for x in -2..=2 {
        let r = greens_check(&init, &types, x, &p, &t, 1.0, 2000, 3, 16).unwrap();
        let kernel = 4.0 * k.prob(x, -2) + 2.0 * k.prob(x, 1);
        assert!((r.rhs.mean - kernel).abs() < 1e-12);
        assert_eq!(r.rhs.se, 0.0);
        assert!(r.z() <= 3.0, "site {x}: {r:?}");
    }
}

#[test]
fn greens_reactive_two_sided() {
    let p = ModelParams::fisher_kpp(1.0, 1.0, 2, 0.2, 0.3);
    let t = TruncationParams::new(1.0, 4);
    let init = Configuration::uniform(2, 1);
    let types: BTreeSet<u32> = [0, 1].into_iter().collect();
    let r = greens_check(&init, &types, 0, &p, &t, 0.5, 4000, 22, 64).unwrap();
    assert!(r.z() <= 3.0, "{r:?}");
}

#[test]
fn tail_bounds_dominate() {
    for alpha in [0.5, 1.0, 2.0] {
        for ratio in [1.0, 2.0, 5.0, 10.0] {
            let r = alpha * ratio;
            assert!(poisson_tail_exact(alpha, r) <= poisson_tail_bound(alpha, r).unwrap());
        }
    }
    let bound = rw_tail_bound(1.0, 1.0, 1.0, 10.0).unwrap();
    let freq = rw_exceedance_mc(1.0, 1.0, 1.0, 10.0, 20_000, 5, None, 0);
    assert!(freq <= bound);
    let reflected = rw_exceedance_mc(2.0, 0.5, 1.0, 2.0, 20_000, 6, Some(6), 0);
    assert!(reflected <= rw_tail_bound(2.0, 0.5, 1.0, 2.0).unwrap());
}

#[test]
fn kernel_agrees_with_walk_frequencies() {
    let p = ModelParams::fisher_kpp(1.0, 2.0, 1, 0.0, 0.5);
    let t = TruncationParams::new(2.0, 1);
    let k = rw_kernel(&p, &t, 0.8).unwrap();
    // P(|X - x| >= 1) from the kernel vs simulation, reflected on {-2..2}
    let kernel = 1.0 - k.prob(0, 0);
    let freq = rw_exceedance_mc(1.0, 2.0, 0.8, 1.0, 20_000, 8, Some(2), 0);
    let se = (kernel * (1.0 - kernel) / 20_000.0).sqrt();
    assert!((freq - kernel).abs() <= 3.0 * se, "{freq} vs {kernel}");
}
