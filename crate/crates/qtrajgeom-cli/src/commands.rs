//! One function per subcommand. Each returns the number of grid points that
//! failed; the driver exits nonzero when any did, but completed rows are
//! always written.

use serde_json::{json, Value};
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use qtrajgeom::action::equilibrium_point;
use qtrajgeom::corrections::{corrected_transition_ratio, find_tau_c_eff};
use qtrajgeom::engine::{
    bootstrap_ratio_ci, propagate_sampled, run_ensemble, self_closing_stats, trajectory_rng,
};
use qtrajgeom::geometry::{
    chern_number, covers_sphere, open_transition_scan, phase_family, sphere_coverage, InitRule,
    RecordRule,
};
use qtrajgeom::optimal::{
    action_n1_closed, chi_n1_closed, equator_n0_branch, find_tau_c_equator, find_theta_c,
    n0_family_over_theta, optimal_geometric_phase_from,
};
use qtrajgeom::{BlochState, MeasurementProtocol, QtError};

use crate::config::{
    ChernConfig, CorrectionsConfig, InitKind, OptimalConfig, RecordKind, SimulateConfig,
    TransitionConfig,
};
use crate::emit::{fmt, write_json, Table};
use crate::CliError;

const VERSION: &str = concat!("qtrajgeom ", env!("CARGO_PKG_VERSION"));

fn summary_base(hash: &str, config: &Value, started: Instant) -> Value {
    json!({
        "version": VERSION,
        "config_hash": hash,
        "config": config,
        "wall_clock_s": started.elapsed().as_secs_f64(),
    })
}

fn init_state(kind: InitKind, axis_theta: f64, tau: f64) -> BlochState {
    match kind {
        InitKind::OnAxis => BlochState::new(axis_theta, 0.0),
        InitKind::Equilibrium => {
            let eq = equilibrium_point(axis_theta, tau);
            BlochState::new(eq.theta_e, eq.phi_e)
        }
    }
}

pub fn simulate(cfg: &SimulateConfig, doc: &Value, hash: &str, out: &Path) -> Result<usize, CliError> {
    let started = Instant::now();
    let protocol = MeasurementProtocol::gaussian(cfg.axis_theta, cfg.tau, cfg.n_steps);
    let init = init_state(cfg.init, cfg.axis_theta, cfg.tau);

    let mut traj = Table::create(
        out,
        "trajectories.csv",
        hash,
        &["traj_id", "step", "t", "theta", "phi_unwrapped", "chi", "r", "log_weight"],
    )?;
    let n_record = cfg.record_trajectories.min(cfg.n_traj);
    for id in 0..n_record {
        let mut rng = trajectory_rng(cfg.seed, id as u64);
        let rec = propagate_sampled(&protocol, &init, &mut rng)?;
        for k in 0..cfg.n_steps {
            // state at the start of step k and the readout drawn during it
            let s = &rec.states[k];
            traj.row(&[
                id.to_string(),
                k.to_string(),
                fmt(rec.times[k]),
                fmt(s.theta),
                fmt(s.phi),
                fmt(s.chi),
                fmt(rec.readouts[k]),
                fmt(rec.log_weight),
            ])?;
        }
    }
    traj.finish()?;

    let summary = run_ensemble(&protocol, &init, cfg.n_traj, cfg.seed, cfg.bin_width)?;
    let mut ens = Table::create(
        out,
        "ensemble.csv",
        hash,
        &["traj_id", "phi_final", "chi_final", "log_weight"],
    )?;
    for id in 0..cfg.n_traj {
        ens.row(&[
            id.to_string(),
            fmt(summary.phi_final[id]),
            fmt(summary.chi_final[id]),
            fmt(summary.log_weight[id]),
        ])?;
    }
    ens.finish()?;

    let mut report = summary_base(hash, doc, started);
    report["histogram"] = json!(summary.histogram);
    match self_closing_stats(&summary, cfg.bin_width) {
        Ok(stats) => {
            let ci = bootstrap_ratio_ci(&summary, cfg.bin_width, 500, 7, 0.95).ok();
            report["post_selection"] = json!({
                "p_winding": stats.p_winding,
                "p_nonwinding": stats.p_nonwinding,
                "r_empirical": stats.r_empirical,
                "n_winding": stats.n_winding,
                "n_nonwinding": stats.n_nonwinding,
                "r_ci_95": ci,
            });
        }
        Err(e) => report["post_selection"] = json!({ "error": e.to_string() }),
    }
    write_json(out, "summary.json", &report)?;
    Ok(0)
}

pub fn optimal(cfg: &OptimalConfig, doc: &Value, hash: &str, out: &Path) -> Result<usize, CliError> {
    let started = Instant::now();
    let theta_grid = cfg.theta_grid.points();
    let mut branches = Table::create(
        out,
        "branches.csv",
        hash,
        &["branch", "n", "Theta", "tau", "action", "density", "chi"],
    )?;
    let mut chi_tab = Table::create(
        out,
        "chi_of_Theta.csv",
        hash,
        &["tau", "Theta", "chi_opt", "n", "merged"],
    )?;
    let mut eq_tab = Table::create(
        out,
        "equilibrium.csv",
        hash,
        &["Theta", "tau", "theta_e", "phi_e"],
    )?;
    let mut failures = 0usize;

    for &tau in &cfg.taus {
        for &th in &theta_grid {
            let eq = equilibrium_point(th, tau);
            eq_tab.row(&[fmt(th), fmt(tau), fmt(eq.theta_e), fmt(eq.phi_e)])?;
        }
        if !cfg.include_branches {
            continue;
        }
        // winding branch is closed-form on the whole latitude range
        let mut winding_row = |th: f64| -> Result<(), CliError> {
            let s = action_n1_closed(th, tau);
            branches.row(&[
                "winding".into(),
                "1".into(),
                fmt(th),
                fmt(tau),
                fmt(s),
                fmt(s.exp()),
                fmt(chi_n1_closed(th, tau)),
            ])
        };
        for &th in &theta_grid {
            winding_row(th)?;
        }
        winding_row(PI / 2.0)?;
        match equator_n0_branch(&[tau], cfg.n_steps) {
            Ok(sols) => {
                let s = &sols[0];
                branches.row(&[
                    "nonwinding".into(),
                    "0".into(),
                    fmt(PI / 2.0),
                    fmt(tau),
                    fmt(s.action),
                    fmt(s.density),
                    fmt(s.chi),
                ])?;
            }
            Err(e) => {
                eprintln!("tau={tau} Theta=pi/2: {e}");
                failures += 1;
            }
        }
        let family = match n0_family_over_theta(tau, &theta_grid, cfg.n_steps) {
            Ok(f) => Some(f),
            // the non-winding family can be absent at strong measurement
            Err(QtError::BranchLost(_)) => None,
            Err(e) => {
                eprintln!("tau={tau}: non-winding family failed: {e}");
                failures += 1;
                None
            }
        };
        if let Some(fam) = &family {
            for (th, sol) in fam.theta.iter().zip(&fam.solutions) {
                branches.row(&[
                    "nonwinding".into(),
                    "0".into(),
                    fmt(*th),
                    fmt(tau),
                    fmt(sol.action),
                    fmt(sol.density),
                    fmt(sol.chi),
                ])?;
            }
        }
        // optimum over the two candidates, latitude by latitude (ascending)
        for &th in &theta_grid {
            let n0 = family.as_ref().and_then(|fam| {
                fam.theta
                    .iter()
                    .position(|t| (t - th).abs() < 1e-12)
                    .map(|i| &fam.solutions[i])
            });
            let (chi, n, merged) = match n0 {
                Some(sol) => optimal_geometric_phase_from(th, tau, sol),
                None => (chi_n1_closed(th, tau), 1, false),
            };
            chi_tab.row(&[fmt(tau), fmt(th), fmt(chi), n.to_string(), merged.to_string()])?;
        }
    }
    branches.finish()?;
    chi_tab.finish()?;
    eq_tab.finish()?;

    let mut report = summary_base(hash, doc, started);
    report["failures"] = json!(failures);
    write_json(out, "summary.json", &report)?;
    Ok(failures)
}

pub fn transition(cfg: &TransitionConfig, doc: &Value, hash: &str, out: &Path) -> Result<usize, CliError> {
    let started = Instant::now();
    let theta_grid = cfg.theta_grid.points();
    let mut failures = 0usize;
    let mut fail = |name: &str, e: CliError| -> Value {
        eprintln!("{name}: {e}");
        failures += 1;
        json!(null)
    };

    let scan = find_theta_c(&cfg.tau_grid, &theta_grid, cfg.n_steps);
    let (tau_c_equator, theta_c, jumps, merges) = match scan {
        Ok(rep) => (
            json!(rep.tau_c),
            json!(rep.theta_c),
            json!(rep
                .theta_jump
                .iter()
                .map(|(tau, j)| json!({ "tau": tau, "theta": j.theta, "merged": j.merged }))
                .collect::<Vec<_>>()),
            json!(rep
                .merge_tau
                .iter()
                .map(|(theta, tau)| json!({ "theta": theta, "tau": tau }))
                .collect::<Vec<_>>()),
        ),
        Err(e) => {
            let v = fail("theta scan", e.into());
            // keep the equator number even if the latitude scan failed
            let tc = find_tau_c_equator(cfg.n_steps).map(|t| json!(t)).unwrap_or(json!(null));
            (tc, v.clone(), v.clone(), v)
        }
    };
    let tau_c_open = open_transition_scan(
        InitRule::OnAxis,
        RecordRule::Greedy,
        &cfg.open_taus,
        cfg.open_n_theta,
        cfg.open_steps,
        cfg.open_substeps,
    )
    .map(|t| json!(t))
    .unwrap_or_else(|e| fail("open scan", e.into()));
    let tau_c_equilibrium_open = open_transition_scan(
        InitRule::Equilibrium,
        RecordRule::FixedUnit,
        &cfg.equilibrium_taus,
        cfg.open_n_theta,
        cfg.open_steps,
        cfg.open_substeps,
    )
    .map(|t| json!(t))
    .unwrap_or_else(|e| fail("equilibrium scan", e.into()));
    let tau_c_eff = find_tau_c_eff(cfg.n_steps)
        .map(|t| json!(t))
        .unwrap_or_else(|e| fail("corrected scan", e.into()));

    let mut report = summary_base(hash, doc, started);
    report["tau_c_equator"] = tau_c_equator;
    report["tau_c_open"] = tau_c_open;
    report["tau_c_equilibrium_open"] = tau_c_equilibrium_open;
    report["Theta_C"] = theta_c;
    report["tau_c_eff"] = tau_c_eff;
    report["theta_jumps"] = jumps;
    report["merges"] = merges;
    report["failures"] = json!(failures);
    write_json(out, "transitions.json", &report)?;
    Ok(failures)
}

pub fn chern(cfg: &ChernConfig, doc: &Value, hash: &str, out: &Path) -> Result<usize, CliError> {
    let started = Instant::now();
    let init = match cfg.init {
        InitKind::OnAxis => InitRule::OnAxis,
        InitKind::Equilibrium => InitRule::Equilibrium,
    };
    let record = match cfg.record {
        RecordKind::Greedy => RecordRule::Greedy,
        RecordKind::FixedUnit => RecordRule::FixedUnit,
    };
    let mut chern_tab = Table::create(
        out,
        "chern.csv",
        hash,
        &["tau", "C_curvature", "C_boundary", "mismatch", "winding_x", "coverage", "covers_sphere"],
    )?;
    let mut chi_tab = Table::create(out, "chi_of_Theta.csv", hash, &["tau", "Theta", "chi_g"])?;
    let mut failures = 0usize;

    for &tau in &cfg.taus {
        let fam = match phase_family(tau, cfg.n_theta, cfg.steps, cfg.substeps, init, record) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("tau={tau}: family failed: {e}");
                failures += 1;
                continue;
            }
        };
        for (th, chi) in fam.theta_grid.iter().zip(&fam.chi_g) {
            chi_tab.row(&[fmt(tau), fmt(*th), fmt(*chi)])?;
        }
        let mid = fam
            .theta_grid
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - PI / 2.0).abs().total_cmp(&(b.1 - PI / 2.0).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let winding_x = (fam.chi_g[mid] - fam.chi_g[0]).abs() / PI;
        // near the transition the two evaluations legitimately disagree at
        // figure resolution; report both and let the mismatch column speak
        let (curvature, boundary) = match chern_number(&fam) {
            Ok(rep) => (rep.curvature, rep.boundary),
            Err(QtError::GridTooCoarse { curvature, boundary }) => (curvature, boundary),
            Err(e) => {
                eprintln!("tau={tau}: Chern evaluation failed: {e}");
                failures += 1;
                continue;
            }
        };
        chern_tab.row(&[
            fmt(tau),
            fmt(curvature),
            fmt(boundary),
            fmt((curvature - boundary).abs()),
            fmt(winding_x),
            fmt(sphere_coverage(&fam)),
            covers_sphere(&fam).to_string(),
        ])?;
    }
    chern_tab.finish()?;
    chi_tab.finish()?;

    let mut report = summary_base(hash, doc, started);
    report["failures"] = json!(failures);
    write_json(out, "summary.json", &report)?;
    Ok(failures)
}

pub fn corrections(cfg: &CorrectionsConfig, doc: &Value, hash: &str, out: &Path) -> Result<usize, CliError> {
    let started = Instant::now();
    let mut ratio = Table::create(
        out,
        "ratio.csv",
        hash,
        &["tau", "R_saddle", "R_corrected", "R_empirical", "ci_lo", "ci_hi", "p_winding", "p_nonwinding"],
    )?;
    let mut failures = 0usize;

    for &tau in &cfg.taus {
        let rep = match corrected_transition_ratio(tau, cfg.n_steps) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("tau={tau}: correction failed: {e}");
                failures += 1;
                continue;
            }
        };
        let mut empirical = [f64::NAN; 5];
        if cfg.monte_carlo {
            let protocol = MeasurementProtocol::gaussian(PI / 2.0, tau, cfg.mc_steps);
            let init = init_state(InitKind::Equilibrium, PI / 2.0, tau);
            let summary = run_ensemble(&protocol, &init, cfg.mc_traj, cfg.seed, cfg.bin_width)?;
            match self_closing_stats(&summary, cfg.bin_width) {
                Ok(stats) => {
                    let (lo, hi) = bootstrap_ratio_ci(
                        &summary,
                        cfg.bin_width,
                        cfg.bootstrap,
                        cfg.bootstrap_seed,
                        cfg.confidence,
                    )?;
                    empirical = [stats.r_empirical, lo, hi, stats.p_winding, stats.p_nonwinding];
                }
                Err(e) => {
                    eprintln!("tau={tau}: ensemble statistics failed: {e}");
                    failures += 1;
                }
            }
        }
        ratio.row(&[
            fmt(tau),
            fmt(rep.r_saddle),
            fmt(rep.r_corrected),
            fmt(empirical[0]),
            fmt(empirical[1]),
            fmt(empirical[2]),
            fmt(empirical[3]),
            fmt(empirical[4]),
        ])?;
    }
    ratio.finish()?;

    let mut report = summary_base(hash, doc, started);
    report["failures"] = json!(failures);
    write_json(out, "summary.json", &report)?;
    Ok(failures)
}
