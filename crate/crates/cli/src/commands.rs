//! One function per subcommand. Replicates run in the ambient rayon pool
//! and are collected in replicate order, so outputs do not depend on the
//! number of threads.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use spatial_ratchet::duality::{
    greens_check, migration_generator_apply, poisson_tail_bound, poisson_tail_exact,
    rw_exceedance_mc, rw_tail_bound, Occupancy, Side,
};
use spatial_ratchet::engine::{simulate_domination_pair, Dynamics, EventKind, Simulator};
use spatial_ratchet::infection::{
    simulate_coupling, spread_csv, CouplingOptions, SpreadReport, SPREAD_CSV_HEADER,
};
use spatial_ratchet::stats::{
    click_times, decay_fit, truncation_convergence, HitCount, MomentAccumulator,
};
use spatial_ratchet::{seed_stream, Configuration, ModelParams, StreamSeed, TruncationParams};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::Command;

/// Runs `cmd` and returns a one-line summary.
pub fn dispatch(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    match cmd {
        Command::Simulate => simulate(cfg, out),
        Command::Dominate => dominate(cfg, out),
        Command::Couple => couple(cfg, out),
        Command::DualityCheck => duality_check(cfg, out),
        Command::GreensCheck => greens(cfg, out),
        Command::SpreadSweep => spread_sweep(cfg, out),
        Command::Moments => moments(cfg, out),
        Command::Converge => converge(cfg, out),
    }
}

fn write(out: &Path, name: &str, body: &str) -> Result<(), CliError> {
    std::fs::write(out.join(name), body)?;
    Ok(())
}

fn setup(cfg: &RunConfig) -> Result<(ModelParams, TruncationParams, Configuration), CliError> {
    let p = cfg.model.params()?;
    let init = cfg.initial.build(p.l)?;
    Ok((p, cfg.trunc(), init))
}

fn seed_label(s: StreamSeed) -> String {
    format!("{}:{}", s.master, s.stream)
}

fn kind_fields(k: EventKind) -> (&'static str, u32, u8) {
    match k {
        EventKind::MigrateLeft { k } => ("migrate_left", k, 0),
        EventKind::MigrateRight { k } => ("migrate_right", k, 0),
        EventKind::Birth { offspring, mutated } => ("birth", offspring, mutated as u8),
        EventKind::Death { k } => ("death", k, 0),
    }
}

pub const EVENTS_CSV_HEADER: &str = "replicate,time,site,kind,k,mutated,deme_total";
pub const REPLICATES_CSV_HEADER: &str = "replicate,seed,events,final_mass,clicks,extinction_time";

fn simulate(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let (p, t, init) = setup(cfg)?;
    let dynamics = match cfg.options.process.as_str() {
        "zeta" => Dynamics::Zeta {
            kappa: cfg.truncation.kappa,
        },
        _ => Dynamics::Eta,
    };
    let trajs = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            Ok(
                Simulator::new(&init, &p, &t, dynamics, seed_stream(cfg.seed, r))?
                    .run(cfg.horizon, &cfg.observe)?,
            )
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut events = format!("{EVENTS_CSV_HEADER}\n");
    let mut reps = format!("{REPLICATES_CSV_HEADER}\n");
    let mut clicks = String::from("replicate,time,from,to,event\n");
    if cfg.options.trajectories {
        std::fs::create_dir_all(out.join("trajectories"))?;
    }
    for (r, tr) in trajs.iter().enumerate() {
        for ev in &tr.events {
            let (kind, k, mutated) = kind_fields(ev.kind);
            let _ = writeln!(
                events,
                "{r},{:.16e},{},{kind},{k},{mutated},{}",
                ev.time, ev.site, ev.deme_total
            );
        }
        let rec = click_times(tr);
        for c in &rec.clicks {
            let _ = writeln!(
                clicks,
                "{r},{:.16e},{},{},{}",
                c.time, c.from, c.to, c.event
            );
        }
        let ext = rec
            .extinction
            .map_or_else(String::new, |x| format!("{x:.16e}"));
        let _ = writeln!(
            reps,
            "{r},{},{},{},{},{ext}",
            seed_label(tr.seed),
            tr.events.len(),
            tr.final_config.total_mass(),
            rec.clicks.len()
        );
        if cfg.options.trajectories {
            std::fs::write(
                out.join("trajectories").join(format!("replicate_{r}.traj")),
                tr.to_bytes(),
            )?;
        }
    }
    write(out, "events.csv", &events)?;
    write(out, "replicates.csv", &reps)?;
    write(out, "clicks.csv", &clicks)?;
    let total: usize = trajs.iter().map(|t| t.events.len()).sum();
    Ok(format!(
        "simulate: {} replicates, {total} events",
        trajs.len()
    ))
}

fn dominate(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let (p, t, init) = setup(cfg)?;
    let runs = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            Ok(simulate_domination_pair(
                &init,
                &p,
                &t,
                cfg.horizon,
                seed_stream(cfg.seed, r),
            )?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut csv = String::from(
        "replicate,seed,checks,eta_events,zeta_events,eta_final_mass,zeta_final_mass\n",
    );
    for (r, run) in runs.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{r},{},{},{},{},{},{}",
            seed_label(run.eta.seed),
            run.checks,
            run.eta.events.len(),
            run.zeta.events.len(),
            run.eta.final_config.total_mass(),
            run.zeta.final_config.total_mass()
        );
    }
    write(out, "dominate.csv", &csv)?;
    let checks: u64 = runs.iter().map(|r| r.checks).sum();
    Ok(format!(
        "dominate: {} replicates, {checks} checked events, 0 violations",
        runs.len()
    ))
}

fn coupling_options(cfg: &RunConfig) -> CouplingOptions {
    CouplingOptions {
        eps: cfg.options.eps,
        guard: cfg.options.guard,
        r: cfg.options.r,
        labels: cfg.options.labels,
        ..Default::default()
    }
}

fn run_coupling(
    a: &Configuration,
    b: &Configuration,
    p: &ModelParams,
    t: &TruncationParams,
    cfg: &RunConfig,
    seed_of: impl Fn(u64) -> StreamSeed + Sync,
) -> Result<Vec<(u64, StreamSeed, SpreadReport)>, CliError> {
    let opts = coupling_options(cfg);
    (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = seed_of(r);
            let (_, rep) = simulate_coupling(a, b, p, t, cfg.horizon, &opts, seed)?;
            Ok((r, seed, rep))
        })
        .collect()
}

fn couple(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let (p, t, a) = setup(cfg)?;
    let b = cfg
        .initial_b
        .as_ref()
        .ok_or_else(|| CliError::Usage("couple needs an [initial_b] section".into()))?
        .build(p.l)?;
    let rows = run_coupling(&a, &b, &p, &t, cfg, |r| seed_stream(cfg.seed, r))?;
    write(out, "spread.csv", &spread_csv(&rows))?;
    let hits = rows.iter().filter(|r| r.2.hit).count();
    Ok(format!("couple: {} replicates, {hits} hits", rows.len()))
}

fn occ_label(o: &Occupancy) -> String {
    o.iter()
        .map(|(s, c)| format!("{s}:{c}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub const DUALITY_TOLERANCE: f64 = 1e-12;

/// A random duality instance on at most five sites with at most four
/// particles in each argument.
pub fn random_duality_case(seed: StreamSeed) -> (i64, u64, Occupancy, Occupancy) {
    let mut rng = seed.rng();
    let hw = rng.below(3) as i64;
    let n = 1 + rng.below(3);
    let draw = |rng: &mut spatial_ratchet::SimRng| {
        let mut o = Occupancy::new();
        for _ in 0..rng.below(5) {
            *o.entry(rng.below(2 * hw as u64 + 1) as i64 - hw)
                .or_default() += 1;
        }
        o
    };
    let xi = draw(&mut rng);
    let zeta = draw(&mut rng);
    (hw, n, xi, zeta)
}

fn duality_check(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let p = cfg.model.params()?;
    let mut csv = String::from("case,N,half_width,xi,zeta,first,second,rel_err,pass\n");
    let mut passed = 0;
    for c in 0..cfg.options.duality_cases {
        let (hw, n, xi, zeta) = random_duality_case(seed_stream(cfg.seed, c));
        let mut q = p.clone();
        q.n = n;
        let t = TruncationParams::new(hw as f64 / p.l, 1);
        let a = migration_generator_apply(Side::First, &xi, &zeta, &q, &t);
        let b = migration_generator_apply(Side::Second, &xi, &zeta, &q, &t);
        let scale = a.abs().max(b.abs());
        let rel = if scale == 0.0 {
            0.0
        } else {
            (a - b).abs() / scale
        };
        let ok = rel <= DUALITY_TOLERANCE;
        passed += usize::from(ok);
        let _ = writeln!(
            csv,
            "{c},{n},{hw},{},{},{a:.16e},{b:.16e},{rel:.16e},{}",
            occ_label(&xi),
            occ_label(&zeta),
            ok as u8
        );
    }
    write(out, "duality.csv", &csv)?;

    let mut tails = String::from("kind,param,threshold,estimate,bound,pass\n");
    let mut tails_ok = true;
    for alpha in [0.5, 1.0, 2.0] {
        for ratio in [2.0, 5.0, 10.0] {
            let r = alpha * ratio;
            let exact = poisson_tail_exact(alpha, r);
            let bound = poisson_tail_bound(alpha, r)?;
            tails_ok &= exact <= bound;
            let _ = writeln!(
                tails,
                "poisson,{alpha:.16e},{r:.16e},{exact:.16e},{bound:.16e},{}",
                (exact <= bound) as u8
            );
        }
    }
    // smallest lattice distance satisfying the precondition
    let sites = (std::f64::consts::E.powi(2) * p.m * cfg.horizon).floor() + 1.0;
    let distance = sites / p.l;
    let bound = rw_tail_bound(p.l, p.m, cfg.horizon, distance)?;
    let freq = rw_exceedance_mc(
        p.l,
        p.m,
        cfg.horizon,
        distance,
        cfg.options.walks,
        cfg.seed,
        None,
        0,
    );
    tails_ok &= freq <= bound;
    let _ = writeln!(
        tails,
        "random_walk,{:.16e},{distance:.16e},{freq:.16e},{bound:.16e},{}",
        p.l,
        (freq <= bound) as u8
    );
    write(out, "tails.csv", &tails)?;

    let total = cfg.options.duality_cases as usize;
    if passed != total || !tails_ok {
        return Err(CliError::Invariant(format!(
            "duality-check: {passed}/{total} symmetry rows pass, tails ok = {tails_ok}"
        )));
    }
    Ok(format!(
        "duality-check: {passed}/{total} symmetry rows pass, tail bounds hold"
    ))
}

fn greens(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let (p, t, init) = setup(cfg)?;
    let types: BTreeSet<u32> = cfg.options.types.iter().copied().collect();
    let mut csv = String::from("site,lhs,lhs_se,rhs,rhs_se,diff,combined_se,paired_se,z,pass\n");
    let mut passed = 0;
    for (i, &x) in cfg.options.probe_sites.iter().enumerate() {
        let master = seed_stream(cfg.seed, 0).derive(i as u64 + 1).master;
        let r = greens_check(
            &init,
            &types,
            x,
            &p,
            &t,
            cfg.horizon,
            cfg.replicates,
            master,
            cfg.options.grid_points,
        )?;
        let ok = r.z() <= cfg.options.envelope;
        passed += usize::from(ok);
        let _ = writeln!(
            csv,
            "{x},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.lhs.mean,
            r.lhs.se,
            r.rhs.mean,
            r.rhs.se,
            r.diff,
            r.combined_se,
            r.paired_se,
            r.z(),
            ok as u8
        );
    }
    write(out, "greens.csv", &csv)?;
    Ok(format!(
        "greens-check: {passed}/{} sites within {} SE",
        cfg.options.probe_sites.len(),
        cfg.options.envelope
    ))
}

fn spread_sweep(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let (p, t, b) = setup(cfg)?;
    let active = t.active_box(p.l);
    let mut csv = format!("distance,{SPREAD_CSV_HEADER}\n");
    let mut points = Vec::new();
    for (i, &dist) in cfg.options.r_grid.iter().enumerate() {
        let site = (dist * p.l).round() as i64;
        if !active.contains(site) {
            return Err(CliError::Usage(format!(
                "seeding site {site} lies outside the active box"
            )));
        }
        let mut a = b.clone();
        a.add(site, 0, 1);
        let rows = run_coupling(&a, &b, &p, &t, cfg, |r| {
            seed_stream(cfg.seed, r).derive(i as u64 + 1)
        })?;
        for line in spread_csv(&rows).lines().skip(1) {
            let _ = writeln!(csv, "{dist:.16e},{line}");
        }
        let hits = rows.iter().filter(|r| r.2.hit).count() as u64;
        points.push(HitCount {
            distance: dist,
            hits,
            trials: rows.len() as u64,
        });
    }
    write(out, "spread.csv", &csv)?;
    let mut decay = String::from("distance,hits,trials,p_hat,se\n");
    for h in &points {
        let _ = writeln!(
            decay,
            "{:.16e},{},{},{:.16e},{:.16e}",
            h.distance,
            h.hits,
            h.trials,
            h.p_hat(),
            h.se()
        );
    }
    write(out, "decay.csv", &decay)?;
    if points.len() < 2 {
        return Ok(format!(
            "spread-sweep: {} distance(s), no fit",
            points.len()
        ));
    }
    let fit = decay_fit(&points, cfg.options.envelope)?;
    write(
        out,
        "decay_fit.csv",
        &format!(
            "slope,slope_se,slope_upper95,non_increasing,decaying\n{:.16e},{:.16e},{:.16e},{},{}\n",
            fit.slope,
            fit.slope_se,
            fit.slope_upper95,
            fit.non_increasing as u8,
            fit.decaying as u8
        ),
    )?;
    Ok(format!(
        "spread-sweep: slope {:.4} (95% upper {:.4}), non-increasing = {}",
        fit.slope, fit.slope_upper95, fit.non_increasing
    ))
}

fn moments(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let (p, t, init) = setup(cfg)?;
    let finals = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            Ok(
                Simulator::new(&init, &p, &t, Dynamics::Eta, seed_stream(cfg.seed, r))?
                    .run(cfg.horizon, &[])?
                    .final_config,
            )
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut acc = MomentAccumulator::new(
        cfg.horizon,
        p.n,
        &cfg.options.probe_sites,
        &cfg.options.exponents,
    );
    for f in &finals {
        acc.push_config(&init, f);
    }
    let rep = acc.finish();
    write(out, "moments.csv", &rep.to_csv())?;
    let mut ratios = String::from("p,sup_mean,normalized_ratio\n");
    for (p_exp, m) in &rep.sup_mean {
        let _ = writeln!(
            ratios,
            "{p_exp},{m:.16e},{:.16e}",
            rep.normalized_ratio[p_exp]
        );
    }
    write(out, "ratios.csv", &ratios)?;
    Ok(format!(
        "moments: {} replicates over {} probe sites",
        finals.len(),
        cfg.options.probe_sites.len()
    ))
}

fn converge(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let (p, _, init) = setup(cfg)?;
    let schedule = cfg.schedule();
    if schedule.is_empty() {
        return Err(CliError::Usage("converge needs truncation.schedule".into()));
    }
    let table = truncation_convergence(
        &init,
        &p,
        &schedule,
        cfg.options.window,
        cfg.horizon,
        cfg.replicates,
        cfg.seed,
        cfg.options.envelope,
    )?;
    write(out, "convergence.csv", &table.to_csv())?;
    Ok(format!(
        "converge: {} levels, converged = {}",
        table.levels.len(),
        table.converged
    ))
}
