//! Boundary-value solver for extremal trajectories of the stochastic
//! action: Newton shooting (single and multiple), branch continuation over
//! protocol parameters, the closed-form winding branch, and the transition
//! searches (tau_c on the equator, Theta_jump / Theta_C off it).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::action::{coefficients, equilibrium_momenta, equilibrium_point, PhasePoint};
use crate::bloch::MeasurementProtocol;
use crate::error::{QtError, Result};

/// Self-closing boundary conditions: initial (theta_0, phi_0, chi_0 = 0),
/// final (theta_0, phi_0 + 2 pi n). The conserved phase momentum is a
/// parameter of the extremal family: 0 encodes the free-final-phase
/// (transversality) problem, the equilibrium value selects the paper's
/// winding family off the equator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCondition {
    pub theta0: f64,
    pub phi0: f64,
    pub winding: i64,
    pub p_chi: f64,
}

impl BoundaryCondition {
    pub fn self_closing(theta0: f64, phi0: f64, winding: i64) -> Self {
        BoundaryCondition {
            theta0,
            phi0,
            winding,
            p_chi: 0.0,
        }
    }

    pub fn phi_target(&self) -> f64 {
        self.phi0 + 2.0 * PI * self.winding as f64
    }
}

/// One converged (or best-effort) extremal branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSolution {
    pub n: i64,
    pub times: Vec<f64>,
    pub path: Vec<PhasePoint>,
    pub readouts: Vec<f64>,
    pub action: f64,
    pub density: f64,
    pub chi: f64,
    pub converged: bool,
    pub shooting_residual: f64,
}

/// A detected discontinuity of the optimal phase over the latitude scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaJump {
    /// Latitude of the discontinuity.
    pub theta: f64,
    /// True when the non-winding family terminated (merged) there while
    /// still dominant, rather than being overtaken in action.
    pub merged: bool,
}

/// Transition data assembled by the scan drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub tau_c: f64,
    /// (tau, detected jump) pairs; taus without a discontinuity are absent.
    pub theta_jump: Vec<(f64, ThetaJump)>,
    /// Smallest jump latitude over the scan window: below it the optimal
    /// phase is a continuous function of the latitude at every scanned tau.
    pub theta_c: f64,
    /// (Theta, tau) samples of the fold boundary: at latitude Theta the
    /// non-winding family exists only for measurement strengths above tau.
    pub merge_tau: Vec<(f64, f64)>,
}

/// Augmented flow state: (phi, theta, chi, p_phi, p_theta, action).
type Flow = [f64; 6];

fn flow_rhs(y: &Flow, p_chi: f64, protocol: &MeasurementProtocol, t: f64) -> Result<Flow> {
    let c = coefficients(y[1], y[0], protocol.theta_axis, protocol.phi_schedule(t))?;
    let tau = protocol.tau;
    let (p_phi, p_theta) = (y[3], y[4]);
    let r = c.a + p_theta * c.g - p_phi * c.f + 0.5 * p_chi * c.h;
    Ok([
        -r / tau * c.f,
        r / tau * c.g,
        r / (2.0 * tau) * c.h,
        r / tau * (p_phi * c.df_dphi - p_theta * c.dg_dphi - 0.5 * p_chi * c.dh_dphi - c.da_dphi),
        r / tau
            * (p_phi * c.df_dtheta
                - p_theta * c.dg_dtheta
                - 0.5 * p_chi * c.dh_dtheta
                - c.da_dtheta),
        (r * (2.0 * c.a - r) - 1.0) / (2.0 * tau),
    ])
}

fn rk4_span(
    mut y: Flow,
    p_chi: f64,
    protocol: &MeasurementProtocol,
    t0: f64,
    t1: f64,
    steps: usize,
    mut sink: Option<&mut dyn FnMut(f64, &Flow)>,
) -> Result<Flow> {
    let h = (t1 - t0) / steps as f64;
    if let Some(s) = sink.as_deref_mut() {
        s(t0, &y);
    }
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = flow_rhs(&y, p_chi, protocol, t)?;
        let k2 = flow_rhs(&addf(&y, &k1, 0.5 * h), p_chi, protocol, t + 0.5 * h)?;
        let k3 = flow_rhs(&addf(&y, &k2, 0.5 * h), p_chi, protocol, t + 0.5 * h)?;
        let k4 = flow_rhs(&addf(&y, &k3, h), p_chi, protocol, t + h)?;
        for i in 0..6 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if let Some(s) = sink.as_deref_mut() {
            s(t0 + (k + 1) as f64 * h, &y);
        }
    }
    Ok(y)
}

fn addf(a: &Flow, b: &Flow, s: f64) -> Flow {
    let mut o = *a;
    for i in 0..6 {
        o[i] += s * b[i];
    }
    o
}

/// Dense Gaussian elimination with partial pivoting.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let m = b.len();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);
    for k in 0..m {
        let piv = (k..m)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .unwrap();
        if a[piv][k].abs() < 1e-13 * scale {
            return Err(QtError::SingularJacobian);
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in (k + 1)..m {
            let f = a[i][k] / a[k][k];
            for j in k..m {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; m];
    for k in (0..m).rev() {
        let mut s = b[k];
        for j in (k + 1)..m {
            s -= a[k][j] * x[j];
        }
        x[k] = s / a[k][k];
    }
    Ok(x)
}

fn inf_norm(v: &[f64]) -> f64 {
    // non-finite entries poison the norm so the line search rejects them
    v.iter().fold(0.0_f64, |a, x| {
        if x.is_finite() {
            a.max(x.abs())
        } else {
            f64::INFINITY
        }
    })
}

fn fd_jacobian<F>(f: &F, x: &[f64], res: &[f64]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let m = x.len();
    let mut jac = vec![vec![0.0; m]; m];
    for j in 0..m {
        let eps = 1e-7 * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        xp[j] += eps;
        match f(&xp).map(|rp| (rp, eps)).or_else(|_| {
            // backward difference if the forward point left the chart
            let mut xm = x.to_vec();
            xm[j] -= eps;
            f(&xm).map(|rm| (rm, -eps))
        }) {
            Ok((rs, e)) => {
                for i in 0..m {
                    jac[i][j] = (rs[i] - res[i]) / e;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(jac)
}

/// Damped quasi-Newton on F: R^m -> R^m. The Jacobian is finite-differenced
/// on the first iteration and after stalls, and Broyden-updated in between
/// (one residual evaluation per accepted step instead of m + 1).
fn newton<F>(f: &F, mut x: Vec<f64>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut res = f(&x)?;
    let mut norm = inf_norm(&res);
    if !norm.is_finite() {
        return Err(QtError::NoConvergence {
            iters: 0,
            residual: norm,
        });
    }
    let m = x.len();
    let mut jac: Option<Vec<Vec<f64>>> = None;
    let mut fresh = false;
    for iter in 0..max_iter {
        if norm < tol {
            return Ok((x, norm));
        }
        if jac.is_none() {
            jac = Some(fd_jacobian(f, &x, &res)?);
            fresh = true;
        }
        let dx = {
            let mut a = jac.clone().expect("jacobian present");
            let mut rhs: Vec<f64> = res.iter().map(|v| -v).collect();
            match solve_dense(&mut a, &mut rhs) {
                Ok(dx) => dx,
                Err(e) => {
                    if fresh {
                        return Err(e);
                    }
                    jac = None; // stale Broyden matrix went singular; rebuild
                    continue;
                }
            }
        };
        let mut accepted = false;
        let mut lam = 1.0;
        for _ in 0..10 {
            let xt: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + lam * d).collect();
            if let Ok(rt) = f(&xt) {
                let nt = inf_norm(&rt);
                if nt < norm {
                    // Broyden rank-1 update from the accepted step
                    let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let ss: f64 = step.iter().map(|v| v * v).sum();
                    if ss > 0.0 {
                        let j = jac.as_mut().expect("jacobian present");
                        for i in 0..m {
                            let pred: f64 = (0..m).map(|k| j[i][k] * step[k]).sum();
                            let corr = (rt[i] - res[i] - pred) / ss;
                            for k in 0..m {
                                j[i][k] += corr * step[k];
                            }
                        }
                    }
                    x = xt;
                    res = rt;
                    norm = nt;
                    accepted = true;
                    fresh = false;
                    break;
                }
            }
            lam *= 0.5;
        }
        if !accepted {
            if !fresh {
                jac = None; // retry the step with a fresh Jacobian
                continue;
            }
            return Err(QtError::NoConvergence {
                iters: iter + 1,
                residual: norm,
            });
        }
    }
    if norm < tol {
        Ok((x, norm))
    } else {
        Err(QtError::NoConvergence {
            iters: max_iter,
            residual: norm,
        })
    }
}

const SHOOT_TOL: f64 = 1e-10;
const CONVERGED_TOL: f64 = 1e-9;

fn is_equator_problem(protocol: &MeasurementProtocol, bc: &BoundaryCondition) -> bool {
    (protocol.theta_axis - PI / 2.0).abs() < 1e-12
        && (bc.theta0 - PI / 2.0).abs() < 1e-12
        && bc.p_chi == 0.0
}

fn initial_flow(bc: &BoundaryCondition, momenta: &[f64]) -> Flow {
    let (p_phi, p_theta) = match momenta.len() {
        1 => (momenta[0], 0.0),
        _ => (momenta[0], momenta[1]),
    };
    [bc.phi0, bc.theta0, 0.0, p_phi, p_theta, 0.0]
}

/// Endpoint (phi(T), theta(T)) of the Hamilton flow launched from `bc`
/// with initial momenta `[p_phi, p_theta]`: the single-shooting map.
pub fn shooting_endpoint(
    protocol: &MeasurementProtocol,
    bc: &BoundaryCondition,
    momenta: &[f64],
    n_steps: usize,
) -> Result<(f64, f64)> {
    let y = rk4_span(
        initial_flow(bc, momenta),
        bc.p_chi,
        protocol,
        0.0,
        protocol.total_time,
        n_steps,
        None,
    )?;
    Ok((y[0], y[1]))
}

/// Newton shooting for a self-closing extremal. `guess` supplies the
/// unknown initial momenta: `[p_phi0]` on equator problems (p_theta stays
/// zero there), `[p_phi0, p_theta0]` otherwise. Falls back to multiple
/// shooting when single shooting stalls.
pub fn solve_bvp(
    protocol: &MeasurementProtocol,
    bc: &BoundaryCondition,
    guess: &[f64],
    n_steps: usize,
) -> Result<BranchSolution> {
    solve_bvp_seeded(protocol, bc, guess, None, n_steps)
}

/// [`solve_bvp`] with an optional warm-start path (typically the solution at
/// a nearby parameter) used to seed multiple-shooting junction states. On
/// stiff problems (endpoint sensitivities grow like exp(T/tau)) single
/// shooting is hopeless and is skipped when a seed path is available.
pub fn solve_bvp_seeded(
    protocol: &MeasurementProtocol,
    bc: &BoundaryCondition,
    guess: &[f64],
    seed: Option<&BranchSolution>,
    n_steps: usize,
) -> Result<BranchSolution> {
    let equator = is_equator_problem(protocol, bc);
    let dim = if equator { 1 } else { 2 };
    let guess: Vec<f64> = if guess.len() >= dim {
        guess[..dim].to_vec()
    } else {
        let mut g = guess.to_vec();
        g.resize(dim, 0.0);
        g
    };
    let t_end = protocol.total_time;
    let phi_target = bc.phi_target();

    let residual = |momenta: &[f64]| -> Result<Vec<f64>> {
        let y = rk4_span(
            initial_flow(bc, momenta),
            bc.p_chi,
            protocol,
            0.0,
            t_end,
            n_steps,
            None,
        )?;
        let mut r = vec![y[0] - phi_target];
        if !equator {
            r.push(y[1] - bc.theta0);
        }
        Ok(r)
    };

    // single shooting is cheap (<= 2 unknowns) and fails fast when the
    // forward sensitivity blows up, so it always goes first; warm-started
    // continuation skips the perturbation restarts
    let stiff = protocol.total_time / protocol.tau >= 8.0;
    let single = newton(&residual, guess.clone(), SHOOT_TOL, 60).or_else(|_| {
        let mut last = Err(QtError::NoConvergence {
            iters: 0,
            residual: f64::INFINITY,
        });
        let scales: &[f64] = if stiff {
            &[1e-3, -1e-3]
        } else {
            &[1e-3, -1e-3, 1e-1, -1e-1]
        };
        for &scale in scales {
            let g: Vec<f64> = guess.iter().map(|v| v + scale * (1.0 + v.abs())).collect();
            last = newton(&residual, g, SHOOT_TOL, 60);
            if last.is_ok() {
                break;
            }
        }
        last
    });
    if let Ok((momenta, res_norm)) = single {
        let segs = vec![initial_flow(bc, &momenta)];
        return build_solution(protocol, bc, segs, res_norm, n_steps);
    }
    let (segs, res_norm) = multiple_shooting(protocol, bc, &guess, seed, n_steps, equator)?;
    build_solution(protocol, bc, segs, res_norm, n_steps)
}

/// Multiple shooting: unknowns are the initial momenta plus the
/// (phi, theta, p_phi, p_theta) state at the interior junctions. The
/// segment count scales with the stiffness T / tau so each segment's
/// sensitivity amplification stays bounded. Returns the segment initial
/// states (chi and action slots zeroed) and the residual norm.
fn multiple_shooting(
    protocol: &MeasurementProtocol,
    bc: &BoundaryCondition,
    guess: &[f64],
    seed: Option<&BranchSolution>,
    n_steps: usize,
    equator: bool,
) -> Result<(Vec<Flow>, f64)> {
    let segments = ((protocol.total_time / protocol.tau / 2.0).ceil() as usize).clamp(4, 32);
    let dim = guess.len();
    let zdim = if equator { 2 } else { 4 };
    let t_end = protocol.total_time;
    let seg_steps = n_steps.div_ceil(segments);
    let phi_target = bc.phi_target();

    // seed the junction states from the warm-start path when present,
    // otherwise from the (non-converged) single-shooting path
    let mut junctions = Vec::with_capacity((segments - 1) * zdim);
    match seed {
        Some(sol) if sol.path.len() > 1 => {
            for s in 1..segments {
                let frac = s as f64 / segments as f64;
                let idx = (frac * (sol.path.len() - 1) as f64).round() as usize;
                let p = &sol.path[idx];
                junctions.push(p.phi);
                if !equator {
                    junctions.push(p.theta);
                }
                junctions.push(p.p_phi);
                if !equator {
                    junctions.push(p.p_theta);
                }
            }
        }
        _ => {
            let mut y = initial_flow(bc, guess);
            for s in 0..segments - 1 {
                let t0 = t_end * s as f64 / segments as f64;
                let t1 = t_end * (s + 1) as f64 / segments as f64;
                y = rk4_span(y, bc.p_chi, protocol, t0, t1, seg_steps, None)
                    .unwrap_or([bc.phi0, bc.theta0, 0.0, 0.0, 0.0, 0.0]);
                if !y.iter().all(|v| v.is_finite()) {
                    y = [bc.phi0, bc.theta0, 0.0, 0.0, 0.0, 0.0];
                }
                junctions.push(y[0]);
                if !equator {
                    junctions.push(y[1]);
                }
                junctions.push(y[3]);
                if !equator {
                    junctions.push(y[4]);
                }
            }
        }
    }
    let mut x0 = guess.to_vec();
    x0.extend_from_slice(&junctions);

    let unpack = |z: &[f64]| -> Flow {
        if equator {
            [z[0], bc.theta0, 0.0, z[1], 0.0, 0.0]
        } else {
            [z[0], z[1], 0.0, z[2], z[3], 0.0]
        }
    };

    let residual = |x: &[f64]| -> Result<Vec<f64>> {
        let mut r = Vec::with_capacity(x.len());
        let mut y = initial_flow(bc, &x[..dim]);
        for s in 0..segments {
            let t0 = t_end * s as f64 / segments as f64;
            let t1 = t_end * (s + 1) as f64 / segments as f64;
            y = rk4_span(y, bc.p_chi, protocol, t0, t1, seg_steps, None)?;
            if s < segments - 1 {
                let z = &x[dim + s * zdim..dim + (s + 1) * zdim];
                let yz = unpack(z);
                r.push(y[0] - yz[0]);
                if !equator {
                    r.push(y[1] - yz[1]);
                }
                r.push(y[3] - yz[3]);
                if !equator {
                    r.push(y[4] - yz[4]);
                }
                y = yz;
            } else {
                r.push(y[0] - phi_target);
                if !equator {
                    r.push(y[1] - bc.theta0);
                }
            }
        }
        Ok(r)
    };

    let (x, norm) = newton(&residual, x0, SHOOT_TOL, 80)?;
    let mut segs = vec![initial_flow(bc, &x[..dim])];
    for s in 0..segments - 1 {
        segs.push(unpack(&x[dim + s * zdim..dim + (s + 1) * zdim]));
    }
    Ok((segs, norm))
}

fn build_solution(
    protocol: &MeasurementProtocol,
    bc: &BoundaryCondition,
    segs: Vec<Flow>,
    res_norm: f64,
    n_steps: usize,
) -> Result<BranchSolution> {
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut path = Vec::with_capacity(n_steps + 1);
    let mut readouts = Vec::with_capacity(n_steps + 1);
    let p_chi = bc.p_chi;
    let segments = segs.len();
    let seg_steps = n_steps.div_ceil(segments);
    let t_end = protocol.total_time;
    let mut y_final = segs[0];
    for (s, seg) in segs.iter().enumerate() {
        // chi and the action accumulate across junctions
        let mut y = *seg;
        if s > 0 {
            y[2] = y_final[2];
            y[5] = y_final[5];
        }
        let t0 = t_end * s as f64 / segments as f64;
        let t1 = t_end * (s + 1) as f64 / segments as f64;
        let mut first = true;
        let mut record = |t: f64, y: &Flow| {
            if s > 0 && first {
                first = false;
                return; // junction point already recorded by the previous segment
            }
            first = false;
            times.push(t);
            path.push(PhasePoint {
                phi: y[0],
                theta: y[1],
                chi: y[2],
                p_phi: y[3],
                p_theta: y[4],
                p_chi,
            });
        };
        y_final = rk4_span(y, p_chi, protocol, t0, t1, seg_steps, Some(&mut record))?;
    }
    for (point, t) in path.iter().zip(&times) {
        let c = coefficients(
            point.theta,
            point.phi,
            protocol.theta_axis,
            protocol.phi_schedule(*t),
        )?;
        readouts
            .push(c.a + point.p_theta * c.g - point.p_phi * c.f + 0.5 * point.p_chi * c.h);
    }
    let action = y_final[5];
    Ok(BranchSolution {
        n: bc.winding,
        times,
        path,
        readouts,
        action,
        density: action.exp(),
        chi: y_final[2],
        converged: res_norm < CONVERGED_TOL && action.is_finite(),
        shooting_residual: res_norm,
    })
}

/// Natural continuation of a branch along a scan parameter. `problem` maps
/// the parameter to the BVP; the solver warm-starts each grid point from
/// the previous solution and bisects the parameter step (up to a fixed
/// depth) when Newton loses the branch.
pub fn track_branch<F>(
    problem: &F,
    grid: &[f64],
    seed_guess: &[f64],
    n_steps: usize,
) -> Result<Vec<BranchSolution>>
where
    F: Fn(f64) -> (MeasurementProtocol, BoundaryCondition),
{
    let mut out: Vec<BranchSolution> = Vec::with_capacity(grid.len());
    let mut prev_param: Option<f64> = None;
    for &target in grid {
        let sol = continue_to(problem, prev_param, target, seed_guess, out.last(), n_steps, 0)?;
        prev_param = Some(target);
        out.push(sol);
    }
    Ok(out)
}

fn initial_momenta(sol: &BranchSolution) -> Vec<f64> {
    let p0 = &sol.path[0];
    vec![p0.p_phi, p0.p_theta]
}

/// One continuation step of [`track_branch`]: solve at `target`
/// warm-started from `prev` (solved at `from`), bisecting the parameter
/// step when the branch is lost.
pub fn continue_to<F>(
    problem: &F,
    from: Option<f64>,
    target: f64,
    guess: &[f64],
    prev: Option<&BranchSolution>,
    n_steps: usize,
    depth: usize,
) -> Result<BranchSolution>
where
    F: Fn(f64) -> (MeasurementProtocol, BoundaryCondition),
{
    let (protocol, bc) = problem(target);
    let g = prev.map(initial_momenta).unwrap_or_else(|| guess.to_vec());
    match solve_bvp_seeded(&protocol, &bc, &g, prev, n_steps) {
        Ok(sol) if sol.converged => Ok(sol),
        other => {
            let Some(start) = from else {
                return other.and_then(|s| {
                    if s.converged {
                        Ok(s)
                    } else {
                        Err(QtError::BranchLost(target))
                    }
                });
            };
            if depth >= 8 {
                return Err(QtError::BranchLost(target));
            }
            let mid = 0.5 * (start + target);
            let half = continue_to(problem, from, mid, guess, prev, n_steps, depth + 1)?;
            continue_to(problem, Some(mid), target, guess, Some(&half), n_steps, depth + 1)
        }
    }
}

/// Geometric phase of the closed-form winding family.
pub fn chi_n1_closed(axis_theta: f64, tau: f64) -> f64 {
    let theta_e = equilibrium_point(axis_theta, tau).theta_e;
    -2.0 * PI * (0.5 * theta_e).sin().powi(2)
}

/// Log-density of the closed-form winding family.
pub fn action_n1_closed(axis_theta: f64, tau: f64) -> f64 {
    let s2 = axis_theta.sin().powi(2);
    -(2.0 * PI * PI * tau * s2) / (4.0 * PI * PI * tau * tau * axis_theta.cos().powi(2) + 1.0)
}

/// Density of the closed-form winding family.
pub fn p_n1_closed(axis_theta: f64, tau: f64) -> f64 {
    action_n1_closed(axis_theta, tau).exp()
}

/// Boundary condition of the winding-n self-closing problem started at the
/// equilibrium point. For n = 1 the conserved phase momentum is set to its
/// equilibrium value so the branch is the exact closed-form family; other
/// windings use the transversality value 0.
pub fn equilibrium_bc(axis_theta: f64, tau: f64, winding: i64) -> Result<BoundaryCondition> {
    let eq = equilibrium_point(axis_theta, tau);
    let p_chi = if winding == 1 {
        equilibrium_momenta(axis_theta, tau)?.2
    } else {
        0.0
    };
    Ok(BoundaryCondition {
        theta0: eq.theta_e,
        phi0: eq.phi_e,
        winding,
        p_chi,
    })
}

/// Guess for the initial momenta of the winding family at (Theta, tau):
/// the lab-frame image of the equilibrium momenta.
pub fn n1_momenta_guess(axis_theta: f64, tau: f64) -> Result<Vec<f64>> {
    let (p_theta, p_phi_rot, _) = equilibrium_momenta(axis_theta, tau)?;
    Ok(vec![-p_phi_rot, p_theta])
}

/// Action of the numerically solved non-winding branch on the equator,
/// continued down from the weak-measurement regime. Returns the branch at
/// each requested tau (descending grids recommended for small tau).
pub fn equator_n0_branch(tau_grid: &[f64], n_steps: usize) -> Result<Vec<BranchSolution>> {
    let problem = |tau: f64| {
        let protocol = MeasurementProtocol::gaussian(PI / 2.0, tau, n_steps);
        let bc = BoundaryCondition::self_closing(PI / 2.0, -(2.0 * PI * tau).atan(), 0);
        (protocol, bc)
    };
    // seed in the weak-measurement regime where p ~ 0 converges, then walk
    let seed_tau = 0.6;
    let mut last = continue_to(&problem, None, seed_tau, &[0.0], None, n_steps, 0)?;
    let mut out = Vec::with_capacity(tau_grid.len());
    let mut prev = seed_tau;
    for &tau in tau_grid {
        let sol = continue_to(&problem, Some(prev), tau, &[], Some(&last), n_steps, 0)?;
        prev = tau;
        last = sol.clone();
        out.push(sol);
    }
    Ok(out)
}

/// Equator transition: the measurement strength where the winding and
/// non-winding branch densities cross, from bisection of
/// g(tau) = -2 pi^2 tau - S^{n=0}(tau).
pub fn find_tau_c_equator(n_steps: usize) -> Result<f64> {
    let lo = 0.02_f64;
    let hi = 0.5_f64;
    // descending coarse scan for the bracket, warm-starting each solve
    let coarse: Vec<f64> = (0..25).map(|i| hi - (hi - lo) * i as f64 / 24.0).collect();
    let sols = equator_n0_branch(&coarse, n_steps)?;
    let g = |tau: f64, s0: f64| -2.0 * PI * PI * tau - s0;
    let mut bracket: Option<(f64, f64, BranchSolution)> = None;
    for k in 0..coarse.len() - 1 {
        let g_hi = g(coarse[k], sols[k].action);
        let g_lo = g(coarse[k + 1], sols[k + 1].action);
        if g_hi * g_lo <= 0.0 {
            bracket = Some((coarse[k + 1], coarse[k], sols[k + 1].clone()));
            break;
        }
    }
    let (mut a, mut b, mut warm) = bracket.ok_or(QtError::NoBracket)?;
    // bisection; each midpoint solve is warm-started from the last one
    let problem = |tau: f64| {
        let protocol = MeasurementProtocol::gaussian(PI / 2.0, tau, n_steps);
        let bc = BoundaryCondition::self_closing(PI / 2.0, -(2.0 * PI * tau).atan(), 0);
        (protocol, bc)
    };
    let mut ga = {
        let s = continue_to(&problem, Some(b), a, &[], Some(&warm), n_steps, 0)?;
        warm = s.clone();
        g(a, s.action)
    };
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        let s = continue_to(&problem, Some(a), mid, &[], Some(&warm), n_steps, 0)?;
        warm = s.clone();
        let gm = g(mid, s.action);
        if gm.abs() < 1e-8 || (b - a).abs() < 1e-12 {
            return Ok(mid);
        }
        if ga * gm <= 0.0 {
            b = mid;
        } else {
            a = mid;
            ga = gm;
        }
    }
    Ok(0.5 * (a + b))
}

/// Most likely closed geometric phase at (Theta, tau): competition between
/// the closed-form winding family and the numeric non-winding branch.
/// Returns (chi_opt, winning n, merged flag). `n0` must be the converged
/// non-winding branch at these parameters.
pub fn optimal_geometric_phase_from(
    axis_theta: f64,
    tau: f64,
    n0: &BranchSolution,
) -> (f64, i64, bool) {
    let s1 = action_n1_closed(axis_theta, tau);
    let chi1 = chi_n1_closed(axis_theta, tau);
    let eq = equilibrium_point(axis_theta, tau);
    // merged when the n=0 path never leaves the equilibrium point's
    // neighborhood in the rotating frame
    let merged = n0
        .path
        .iter()
        .zip(&n0.times)
        .all(|(p, t)| {
            let phi_rot = 2.0 * PI * t - p.phi;
            (p.theta - eq.theta_e).abs() < 1e-4 && (phi_rot + eq.phi_e).abs() < 1e-4
        });
    if merged {
        return (chi1, 1, true);
    }
    if s1 > n0.action {
        (chi1, 1, false)
    } else {
        (n0.chi, 0, false)
    }
}

/// Highest latitude at which the off-equator family is tracked: the
/// required initial p_theta grows like 1/cos(Theta) toward the equator.
pub const N0_THETA_CAP: f64 = 1.55;
/// Weak-measurement strength at which the family is anchored (p ~ 0).
const N0_SEED_TAU: f64 = 0.6;
/// Below this continuation step the branch is declared folded.
const N0_MIN_STEP: f64 = 5e-4;

fn n0_problem(theta: f64, tau: f64, n_steps: usize) -> (MeasurementProtocol, BoundaryCondition) {
    let protocol = MeasurementProtocol::gaussian(theta, tau, n_steps);
    let eq = equilibrium_point(theta, tau);
    let bc = BoundaryCondition::self_closing(eq.theta_e, eq.phi_e, 0);
    (protocol, bc)
}

/// The non-winding family at fixed tau across a latitude grid.
#[derive(Debug, Clone, PartialEq)]
pub struct N0Family {
    pub tau: f64,
    /// Descending latitudes actually covered (a prefix of the sorted grid).
    pub theta: Vec<f64>,
    pub solutions: Vec<BranchSolution>,
    /// Latitude where the branch terminated (folded / merged), when the
    /// termination happens inside the grid.
    pub fold: Option<f64>,
}

/// Branch-identity walker: continues the family to new latitudes while
/// rejecting converged solutions whose initial momenta leave the
/// extrapolation tube of the branch. In the merging region many nearby
/// extremals coexist and plain Newton continuation silently hops between
/// them; the tube keeps the walk on one branch so that the fold is
/// detected instead of being papered over.
struct N0Walker {
    tau: f64,
    n_steps: usize,
    theta: f64,
    sol: BranchSolution,
    /// d(momenta)/d(theta) estimated from the last accepted step
    slope: Option<[f64; 2]>,
}

impl N0Walker {
    fn momenta(sol: &BranchSolution) -> [f64; 2] {
        [sol.path[0].p_phi, sol.path[0].p_theta]
    }

    fn try_at(&self, to: f64) -> Option<BranchSolution> {
        let (protocol, bc) = n0_problem(to, self.tau, self.n_steps);
        let dth = to - self.theta;
        let p = Self::momenta(&self.sol);
        let pred = match self.slope {
            Some(s) => [p[0] + s[0] * dth, p[1] + s[1] * dth],
            None => p,
        };
        let sol = solve_bvp_seeded(&protocol, &bc, &pred, Some(&self.sol), self.n_steps).ok()?;
        if !sol.converged {
            return None;
        }
        let q = Self::momenta(&sol);
        let expected = [pred[0] - p[0], pred[1] - p[1]];
        // the first step has no slope estimate and must absorb the full
        // secant; afterwards only curvature-sized deviations are allowed,
        // tight enough that a hop to a neighboring root is rejected
        let tol = match self.slope {
            None => 0.005 + 8.0 * dth.abs(),
            Some(_) => 0.002 + dth.abs() + 0.2 * expected[0].abs().max(expected[1].abs()),
        };
        let dev = (q[0] - pred[0]).abs().max((q[1] - pred[1]).abs());
        if dev > tol {
            return None;
        }
        Some(sol)
    }

    /// Walk to `target`, sub-stepping as needed. Returns false when the
    /// branch folds first (the walker stays at the last reachable point).
    fn advance_to(&mut self, target: f64) -> bool {
        let mut budget = 80;
        while (self.theta - target).abs() > 1e-12 {
            let mut step = target - self.theta;
            loop {
                if budget == 0 {
                    return false;
                }
                budget -= 1;
                let to = if step.abs() < (target - self.theta).abs() {
                    self.theta + step
                } else {
                    target
                };
                if let Some(sol) = self.try_at(to) {
                    let dth = to - self.theta;
                    let p = Self::momenta(&self.sol);
                    let q = Self::momenta(&sol);
                    self.slope = Some([(q[0] - p[0]) / dth, (q[1] - p[1]) / dth]);
                    self.theta = to;
                    self.sol = sol;
                    break;
                }
                step *= 0.5;
                if step.abs() < N0_MIN_STEP {
                    return false;
                }
            }
        }
        true
    }
}

/// Solve the non-winding (most likely excluding the winding family) branch
/// across a latitude grid at fixed tau. The branch is anchored in the
/// weak-measurement regime (where the momenta vanish) at a mid-latitude,
/// walked in tau down to the target strength, then continued across the
/// grid with a branch-identity guard. Latitudes above [`N0_THETA_CAP`] are
/// dropped. The family terminates (merges) at a tau-dependent latitude;
/// the covered prefix and the fold latitude are reported.
pub fn n0_family_over_theta(tau: f64, theta_grid: &[f64], n_steps: usize) -> Result<N0Family> {
    let mut grid: Vec<f64> = theta_grid
        .iter()
        .copied()
        .filter(|&t| t <= N0_THETA_CAP && t > 10.0 * N0_MIN_STEP)
        .collect();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    if grid.is_empty() {
        return Err(QtError::BranchLost(tau));
    }
    // anchor: tau-walk at a mid-latitude; fall back to higher anchors when
    // the family has already merged at the lower one for this tau
    let mut anchored: Option<(f64, BranchSolution)> = None;
    for &anchor in &[1.3_f64, 1.45, N0_THETA_CAP] {
        let problem = |t: f64| n0_problem(anchor, t, n_steps);
        let walk: Vec<f64> = if tau >= N0_SEED_TAU {
            vec![tau]
        } else {
            (0..20)
                .map(|i| N0_SEED_TAU + (tau - N0_SEED_TAU) * i as f64 / 19.0)
                .collect()
        };
        match track_branch(&problem, &walk, &[0.0, 0.0], n_steps) {
            Ok(mut sols) => {
                anchored = Some((anchor, sols.pop().expect("nonempty walk")));
                break;
            }
            Err(QtError::BranchLost(_) | QtError::NoConvergence { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let Some((anchor, anchor_sol)) = anchored else {
        return Err(QtError::BranchLost(tau));
    };
    // fill grid points above the anchor (walking up), then walk down in a
    // fresh walker restarted at the anchor: the near-equator zone has steep
    // momenta and traversing it twice would contaminate the lower walk
    let mut walker = N0Walker {
        tau,
        n_steps,
        theta: anchor,
        sol: anchor_sol.clone(),
        slope: None,
    };
    let mut upper: Vec<(f64, BranchSolution)> = Vec::new();
    for &th in grid.iter().rev().filter(|&&t| t > anchor) {
        if !walker.advance_to(th) {
            return Err(QtError::BranchLost(th));
        }
        upper.push((th, walker.sol.clone()));
    }
    walker = N0Walker {
        tau,
        n_steps,
        theta: anchor,
        sol: anchor_sol,
        slope: None,
    };
    let mut theta: Vec<f64> = upper.iter().rev().map(|(t, _)| *t).collect();
    let mut solutions: Vec<BranchSolution> = upper.into_iter().rev().map(|(_, s)| s).collect();
    let mut fold = None;
    for &th in grid.iter().filter(|&&t| t <= anchor) {
        if walker.advance_to(th) {
            theta.push(th);
            solutions.push(walker.sol.clone());
        } else {
            fold = Some(walker.theta);
            break;
        }
    }
    Ok(N0Family {
        tau,
        theta,
        solutions,
        fold,
    })
}

/// Scan chi_opt(Theta) for a discontinuity at fixed tau, walking down from
/// the equator. The jump sits either where the winding family overtakes
/// the non-winding branch in action (crossing) or where the non-winding
/// branch terminates while still dominant (merger). A candidate is only
/// reported when the phase gap exceeds 10x the local smooth variation of
/// chi_opt. None when the winding family dominates the whole grid.
pub fn scan_theta_jump(
    tau: f64,
    theta_grid: &[f64],
    n_steps: usize,
) -> Result<Option<ThetaJump>> {
    match n0_family_over_theta(tau, theta_grid, n_steps) {
        Ok(f) => Ok(jump_of_family(&f)),
        // no non-winding branch anywhere on the grid: chi_opt is the
        // winding family's smooth closed form
        Err(QtError::BranchLost(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Jump detector on a solved family: the phase gap at the candidate must
/// beat 10x the local smooth variation of chi_opt per grid step.
fn jump_of_family(family: &N0Family) -> Option<ThetaJump> {
    let tau = family.tau;
    let d: Vec<f64> = family
        .theta
        .iter()
        .zip(&family.solutions)
        .map(|(&th, s)| action_n1_closed(th, tau) - s.action)
        .collect();
    let spacing = if family.theta.len() > 1 {
        (family.theta[0] - family.theta[family.theta.len() - 1])
            / (family.theta.len() - 1) as f64
    } else {
        0.01
    };
    let local = |th: f64| (chi_n1_closed(th - spacing, tau) - chi_n1_closed(th, tau)).abs();
    for w in 0..family.theta.len().saturating_sub(1) {
        if d[w] < 0.0 && d[w + 1] >= 0.0 {
            let t = d[w] / (d[w] - d[w + 1]);
            let theta_x = family.theta[w] + t * (family.theta[w + 1] - family.theta[w]);
            let gap = (chi_n1_closed(theta_x, tau) - family.solutions[w].chi).abs();
            if gap > 10.0 * local(theta_x) {
                return Some(ThetaJump {
                    theta: theta_x,
                    merged: false,
                });
            }
            return None;
        }
    }
    // no crossing: a fold with the branch still dominant is a jump too
    if let (Some(fold), Some(&d_last)) = (family.fold, d.last()) {
        if d_last < 0.0 {
            let s_last = family.solutions.last().expect("nonempty family");
            let gap = (chi_n1_closed(fold, tau) - s_last.chi).abs();
            if gap > 10.0 * local(fold) {
                return Some(ThetaJump {
                    theta: fold,
                    merged: true,
                });
            }
        }
    }
    None
}

/// Transition report over a tau window: the equator crossing tau_c, the
/// jump latitude per tau, the smallest jump latitude Theta_C (below it
/// chi_opt is continuous at every scanned tau), and fold-boundary samples.
pub fn find_theta_c(
    tau_grid: &[f64],
    theta_grid: &[f64],
    n_steps: usize,
) -> Result<TransitionReport> {
    let tau_c = find_tau_c_equator(n_steps)?;
    let mut jumps = Vec::new();
    let mut merge_tau = Vec::new();
    let mut theta_c = f64::NAN;
    for &tau in tau_grid {
        let fam = match n0_family_over_theta(tau, theta_grid, n_steps) {
            Ok(f) => f,
            Err(QtError::BranchLost(_)) => continue,
            Err(e) => return Err(e),
        };
        if let Some(fold) = fam.fold {
            merge_tau.push((fold, tau));
        }
        if let Some(j) = jump_of_family(&fam) {
            jumps.push((tau, j));
            if theta_c.is_nan() || j.theta < theta_c {
                theta_c = j.theta;
            }
        }
    }
    if jumps.is_empty() {
        return Err(QtError::NoFlip);
    }
    Ok(TransitionReport {
        tau_c,
        theta_jump: jumps,
        theta_c,
        merge_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{phi_eq, phi_eq_momentum, phi_eq_readout};
    use approx::assert_abs_diff_eq;

    #[test]
    fn n1_equator_recovers_phi_eq() {
        let tau = 0.1;
        let protocol = MeasurementProtocol::gaussian(PI / 2.0, tau, 2000);
        let bc = BoundaryCondition::self_closing(PI / 2.0, -(2.0 * PI * tau).atan(), 1);
        let sol = solve_bvp(&protocol, &bc, &[phi_eq_momentum(tau)], 2000).unwrap();
        assert!(sol.converged);
        assert!(sol.shooting_residual < 1e-9);
        for (t, p) in sol.times.iter().zip(&sol.path) {
            assert_abs_diff_eq!(p.phi, phi_eq(*t, tau, 1.0), epsilon = 1e-8);
            assert_abs_diff_eq!(p.theta, PI / 2.0, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(sol.action, -2.0 * PI * PI * tau, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.chi, -PI, epsilon = 1e-8);
        // readouts satisfy the constraint closed form
        for r in &sol.readouts {
            assert_abs_diff_eq!(*r, phi_eq_readout(tau), epsilon = 1e-7);
        }
    }

    #[test]
    fn n1_general_theta_recovers_equilibrium_family() {
        for &(axis_theta, tau) in &[(1.1, 0.1), (0.8, 0.2), (2.0, 0.15)] {
            let protocol = MeasurementProtocol::gaussian(axis_theta, tau, 2000);
            let bc = equilibrium_bc(axis_theta, tau, 1).unwrap();
            let guess = n1_momenta_guess(axis_theta, tau).unwrap();
            let sol = solve_bvp(&protocol, &bc, &guess, 2000).unwrap();
            assert!(sol.converged);
            let eq = equilibrium_point(axis_theta, tau);
            for (t, p) in sol.times.iter().zip(&sol.path) {
                assert_abs_diff_eq!(p.theta, eq.theta_e, epsilon = 1e-8);
                assert_abs_diff_eq!(p.phi, eq.phi_e + 2.0 * PI * t, epsilon = 1e-8);
            }
            assert_abs_diff_eq!(
                sol.action,
                action_n1_closed(axis_theta, tau),
                epsilon = 1e-8
            );
            assert_abs_diff_eq!(sol.chi, chi_n1_closed(axis_theta, tau), epsilon = 1e-8);
        }
    }

    #[test]
    fn closed_forms_limits() {
        assert_abs_diff_eq!(chi_n1_closed(PI / 2.0, 0.3), -PI, epsilon = 1e-12);
        assert_abs_diff_eq!(
            chi_n1_closed(1.2, 1e-9),
            -2.0 * PI * (0.6_f64).sin().powi(2),
            epsilon = 1e-7
        );
        assert_abs_diff_eq!(p_n1_closed(1.2, 1e-9), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(
            action_n1_closed(PI / 2.0, 0.17),
            -2.0 * PI * PI * 0.17,
            epsilon = 1e-12
        );
    }

    #[test]
    fn n0_equator_branch_tracks_and_converges() {
        let grid: Vec<f64> = (0..13).map(|i| 0.5 - 0.48 * i as f64 / 12.0).collect();
        let sols = equator_n0_branch(&grid, 1500).unwrap();
        for s in &sols {
            assert!(s.converged, "residual {}", s.shooting_residual);
            assert!(s.action <= 1e-12);
            // non-winding phase is zero on the equator
            assert_abs_diff_eq!(s.chi, 0.0, epsilon = 1e-7);
        }
        // weak-measurement asymptotic: S ~ -1/(4 tau)
        let s_weak = sols[0].action;
        assert!((s_weak - (-1.0 / (4.0 * 0.5))).abs() < 0.1, "{s_weak}");
    }

    #[test]
    fn n0_action_grid_convergence() {
        let tau = 0.1;
        let a = equator_n0_branch(&[tau], 1500).unwrap()[0].action;
        let b = equator_n0_branch(&[tau], 3000).unwrap()[0].action;
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn extremality_residual_on_grid() {
        let tau = 0.3;
        let sols = equator_n0_branch(&[tau], 20000).unwrap();
        let sol = &sols[0];
        let protocol = MeasurementProtocol::gaussian(PI / 2.0, tau, 1);
        let h = sol.times[1] - sol.times[0];
        let mut worst = 0.0_f64;
        let comp = |p: &PhasePoint| [p.phi, p.theta, p.chi, p.p_phi, p.p_theta];
        for k in 2..sol.times.len() - 2 {
            let p = &sol.path[k];
            let y = [p.phi, p.theta, p.chi, p.p_phi, p.p_theta, 0.0];
            let rhs = flow_rhs(&y, 0.0, &protocol, sol.times[k]).unwrap();
            let (m2, m1) = (comp(&sol.path[k - 2]), comp(&sol.path[k - 1]));
            let (p1, p2) = (comp(&sol.path[k + 1]), comp(&sol.path[k + 2]));
            for i in 0..5 {
                let fd = (m2[i] - 8.0 * m1[i] + 8.0 * p1[i] - p2[i]) / (12.0 * h);
                worst = worst.max((fd - rhs[i]).abs());
            }
        }
        assert!(worst < 1e-7, "worst residual {worst:e}");
    }

    #[test]
    fn branch_ordering_and_tau_c() {
        let tau_c = find_tau_c_equator(1500).unwrap();
        assert!(
            (0.10..=0.12).contains(&tau_c),
            "tau_c = {tau_c} outside [0.10, 0.12]"
        );
        // ordering on both sides
        let sols = equator_n0_branch(&[0.2, tau_c, 0.05], 1500).unwrap();
        assert!(-2.0 * PI * PI * 0.05 > sols[2].action);
        assert!(-2.0 * PI * PI * 0.2 < sols[0].action);
        // at the root the densities agree
        let p1 = (-2.0 * PI * PI * tau_c).exp();
        let p0 = sols[1].density;
        assert!((p1 - p0).abs() / p1 < 1e-6, "{p1} vs {p0}");
    }

    #[test]
    fn winding_two_is_suppressed() {
        for &tau in &[0.05, 0.12, 0.3] {
            let protocol = MeasurementProtocol::gaussian(PI / 2.0, tau, 1500);
            let bc = BoundaryCondition::self_closing(PI / 2.0, -(2.0 * PI * tau).atan(), 2);
            // seed near twice the winding momentum
            if let Ok(sol) = solve_bvp(&protocol, &bc, &[2.0 * phi_eq_momentum(tau)], 1500) {
                if sol.converged {
                    let s0 = equator_n0_branch(&[tau], 1500).unwrap()[0].action;
                    let s1 = -2.0 * PI * PI * tau;
                    assert!(
                        sol.action < s0.min(s1),
                        "tau {tau}: S2 {} not below {} and {}",
                        sol.action,
                        s0,
                        s1
                    );
                }
            }
        }
    }

    #[test]
    fn optimal_phase_sides_of_equator_transition() {
        let n0_strong = equator_n0_branch(&[0.05], 1500).unwrap();
        let (chi, n, merged) = optimal_geometric_phase_from(PI / 2.0, 0.05, &n0_strong[0]);
        assert_eq!(n, 1);
        assert!(!merged);
        assert_abs_diff_eq!(chi, -PI, epsilon = 1e-9);
        let n0_weak = equator_n0_branch(&[0.3], 1500).unwrap();
        let (chi, n, _) = optimal_geometric_phase_from(PI / 2.0, 0.3, &n0_weak[0]);
        assert_eq!(n, 0);
        assert_abs_diff_eq!(chi, 0.0, epsilon = 1e-7);
    }

    #[test]
    fn theta_jump_scan_finds_transition_latitude() {
        let theta_grid: Vec<f64> = (0..64)
            .map(|i| 0.3 + (PI / 2.0 - 0.3) * i as f64 / 63.0)
            .collect();
        // above tau_c: the jump sits below the equator latitude
        let j = scan_theta_jump(0.15, &theta_grid, 1200).unwrap();
        let jump = j.expect("jump expected at tau = 0.15");
        assert!((jump.theta - 1.26).abs() < 0.03, "{jump:?}");
        assert!(!jump.merged, "{jump:?}");
        // well below tau_c: winding family dominates everywhere
        let j = scan_theta_jump(0.05, &theta_grid, 1200).unwrap();
        assert!(j.is_none(), "{j:?}");
    }
}
