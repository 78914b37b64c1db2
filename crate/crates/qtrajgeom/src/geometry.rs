//! Geometric phases of open monitored trajectories (geodesic closure),
//! Chern and winding diagnostics for latitude families, and the open-phase
//! topological transition scans.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::action::equilibrium_point;
use crate::bloch::{BlochState, MeasurementProtocol};
use crate::engine::{propagate_with_record, RecordMode, TrajectoryRecord};
use crate::error::{QtError, Result};
use crate::par::par_map;

/// Pole regularization: latitude grids span [POLE_EPS, pi - POLE_EPS].
pub const POLE_EPS: f64 = 1e-3;

/// State preparation of a family member at latitude Theta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitRule {
    /// Along the initial measurement axis: theta(0) = Theta, phi(0) = Phi(0).
    OnAxis,
    /// At the co-rotating equilibrium point (theta_e, phi_e).
    Equilibrium,
}

/// Readout record driving a family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordRule {
    /// Most likely record r(t) = a(t).
    Greedy,
    /// Post-selected constant record r(t) = 1.
    FixedUnit,
}

/// A family of open trajectories over the measurement latitude.
#[derive(Debug, Clone)]
pub struct PhaseFamily {
    pub tau: f64,
    pub theta_grid: Vec<f64>,
    pub trajectories: Vec<TrajectoryRecord>,
    pub chi_g: Vec<f64>,
}

/// Both Chern evaluations plus their mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChernReport {
    pub curvature: f64,
    pub boundary: f64,
    pub mismatch: f64,
}

/// Geometric phase of an open trajectory closed by the shorter geodesic:
/// the accumulated (parallel-transport) phase plus the argument of the
/// boundary overlap, taken on the branch continuous with the accumulated
/// chi rather than folded to (-pi, pi].
pub fn geometric_phase_open(traj: &TrajectoryRecord) -> Result<f64> {
    let s0 = &traj.states[0];
    let st = traj.final_state();
    let half0 = 0.5 * s0.theta;
    let half_t = 0.5 * st.theta;
    // chi-stripped boundary overlap <psi(0)|psi(T)>
    let ov = C64::new(half0.cos() * half_t.cos(), 0.0)
        + C64::from_polar(half0.sin() * half_t.sin(), st.phi - s0.phi);
    if ov.norm() < 1e-10 {
        return Err(QtError::AntipodalEndpoints);
    }
    Ok(st.chi - s0.chi + ov.arg())
}

/// Compute and store the geodesically closed phase on the record.
pub fn fill_geometric_phase(traj: &mut TrajectoryRecord) -> Result<f64> {
    let chi = geometric_phase_open(traj)?;
    traj.geometric_phase = Some(chi);
    Ok(chi)
}

/// Uniform latitude grid on [POLE_EPS, pi - POLE_EPS].
pub fn theta_grid(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| POLE_EPS + (PI - 2.0 * POLE_EPS) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Build the open-trajectory family at fixed tau: one protocol per grid
/// latitude, all on a common time grid. Members run in parallel.
pub fn phase_family(
    tau: f64,
    n_theta: usize,
    steps: usize,
    substeps: usize,
    init: InitRule,
    record: RecordRule,
) -> Result<PhaseFamily> {
    let grid = theta_grid(n_theta);
    let members: Vec<Result<(TrajectoryRecord, f64)>> = par_map(n_theta, |i| {
        let axis_theta = grid[i];
        let protocol = MeasurementProtocol::gaussian(axis_theta, tau, steps);
        let state0 = match init {
            InitRule::OnAxis => BlochState {
                theta: axis_theta,
                phi: 0.0,
                chi: 0.0,
            },
            InitRule::Equilibrium => {
                let eq = equilibrium_point(axis_theta, tau);
                BlochState {
                    theta: eq.theta_e,
                    phi: eq.phi_e,
                    chi: 0.0,
                }
            }
        };
        let unit = |_: f64| 1.0;
        let mode = match record {
            RecordRule::Greedy => RecordMode::Greedy,
            RecordRule::FixedUnit => RecordMode::Fixed(&unit),
        };
        let mut traj = propagate_with_record(&protocol, &state0, &mode, substeps)?;
        let chi = fill_geometric_phase(&mut traj)?;
        Ok((traj, chi))
    });
    let mut trajectories = Vec::with_capacity(n_theta);
    let mut chi_g: Vec<f64> = Vec::with_capacity(n_theta);
    for m in members {
        let (t, mut c) = m?;
        // chi_g is defined mod 2 pi per member; pick the branch continuous
        // over Theta (pole handoffs inside the engine can rebrand chi by 2 pi
        // without changing the spinor)
        if let Some(&prev) = chi_g.last() {
            c -= 2.0 * PI * ((c - prev) / (2.0 * PI)).round();
        }
        trajectories.push(t);
        chi_g.push(c);
    }
    Ok(PhaseFamily {
        tau,
        theta_grid: grid,
        trajectories,
        chi_g,
    })
}

/// Chern number of the family, evaluated two ways: the Berry-curvature
/// integral over the (Theta, t) grid by centered differences, and the
/// boundary formula (chi(pi) - chi(0)) / 2 pi. Errors when the two
/// evaluations disagree beyond the quantization scale.
pub fn chern_number(family: &PhaseFamily) -> Result<ChernReport> {
    let n_th = family.theta_grid.len();
    let n_t = family.trajectories[0].times.len();
    if n_th < 3 || n_t < 3 {
        return Err(QtError::GridTooCoarse {
            curvature: f64::NAN,
            boundary: f64::NAN,
        });
    }
    let spinor = |i: usize, j: usize| family.trajectories[i].states[j].spinor();
    let d_th = family.theta_grid[1] - family.theta_grid[0];
    let d_t = family.trajectories[0].times[1] - family.trajectories[0].times[0];

    // B = Im{d_t <psi|d_Theta psi> - d_Theta <psi|d_t psi>}
    //   = 2 Im <d_t psi | d_Theta psi>, centered differences in the interior
    let curvature_at = |i: usize, j: usize| -> f64 {
        let dpsi_dth = [
            (spinor(i + 1, j)[0] - spinor(i - 1, j)[0]) / (2.0 * d_th),
            (spinor(i + 1, j)[1] - spinor(i - 1, j)[1]) / (2.0 * d_th),
        ];
        let dpsi_dt = [
            (spinor(i, j + 1)[0] - spinor(i, j - 1)[0]) / (2.0 * d_t),
            (spinor(i, j + 1)[1] - spinor(i, j - 1)[1]) / (2.0 * d_t),
        ];
        2.0 * (dpsi_dt[0].conj() * dpsi_dth[0] + dpsi_dt[1].conj() * dpsi_dth[1]).im
    };

    // trapezoid over the interior node lattice; the O(POLE_EPS) caps are
    // far below the quantization tolerance and are dropped
    let rows: Vec<f64> = par_map(n_th - 2, |ii| {
        let i = ii + 1;
        let mut row = 0.0;
        for j in 1..n_t - 1 {
            let w = if j == 1 || j == n_t - 2 { 0.5 } else { 1.0 };
            row += w * curvature_at(i, j);
        }
        row
    });
    let mut integral = 0.0;
    for (ii, row) in rows.iter().enumerate() {
        let w = if ii == 0 || ii == n_th - 3 { 0.5 } else { 1.0 };
        integral += w * row;
    }
    let curvature = integral * d_th * d_t / (2.0 * PI);

    let boundary = (family.chi_g[n_th - 1] - family.chi_g[0]) / (2.0 * PI);
    let mismatch = (curvature - boundary).abs();
    if mismatch > 0.05 {
        return Err(QtError::GridTooCoarse {
            curvature,
            boundary,
        });
    }
    Ok(ChernReport {
        curvature,
        boundary,
        mismatch,
    })
}

/// Winding number of the chi(Theta) curve: w = round(|chi(pi/2) - chi(0)| / pi),
/// clamped to {0, 1}. The grid must contain (a point within one spacing of)
/// the equator.
pub fn winding_number(theta_grid: &[f64], chi_g: &[f64]) -> Result<u8> {
    let mid = equator_index(theta_grid)?;
    let x = (chi_g[mid] - chi_g[0]).abs() / PI;
    let w = x.round().clamp(0.0, 1.0);
    if (x - w).abs() > 0.1 {
        return Err(QtError::NonQuantized(x));
    }
    Ok(w as u8)
}

fn equator_index(theta_grid: &[f64]) -> Result<usize> {
    theta_grid
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - PI / 2.0).abs().total_cmp(&(b.1 - PI / 2.0).abs()))
        .map(|(i, _)| i)
        .ok_or(QtError::GridTooCoarse {
            curvature: f64::NAN,
            boundary: f64::NAN,
        })
}

/// Coverage proxy for the family image on the Bloch sphere: the southernmost
/// latitude reached by the family (max over members and times of theta).
/// The image is a connected set reaching the north pole through the
/// Theta -> 0 members, so it covers the sphere exactly when it also reaches
/// the south polar region.
pub fn sphere_coverage(family: &PhaseFamily) -> f64 {
    family
        .trajectories
        .iter()
        .flat_map(|t| t.states.iter())
        .fold(0.0_f64, |acc, s| acc.max(s.theta))
}

/// Whether the family image covers the sphere under the proxy threshold.
pub fn covers_sphere(family: &PhaseFamily) -> bool {
    sphere_coverage(family) > PI - 0.2
}

/// Winding of the chi(Theta) curve at one tau for the scan. Unlike
/// [`winding_number`] this never rejects intermediate values: the phase of
/// these driven families passes continuously through -pi/2 right at the
/// transition, so bisection classifies by the nearest plateau.
fn scan_w(
    tau: f64,
    init: InitRule,
    record: RecordRule,
    n_theta: usize,
    steps: usize,
    substeps: usize,
) -> Result<u8> {
    let fam = phase_family(tau, n_theta, steps, substeps, init, record)?;
    let mid = equator_index(&fam.theta_grid)?;
    let x = (fam.chi_g[mid] - fam.chi_g[0]).abs() / PI;
    Ok(u8::from(x >= 0.5))
}

/// Open-phase transition scan: evaluate the winding over an ascending tau
/// grid, check it flips monotonically from 1 to 0 once, and bisect the flip
/// interval. Returns the transition strength tau_c.
pub fn open_transition_scan(
    init: InitRule,
    record: RecordRule,
    tau_grid: &[f64],
    n_theta: usize,
    steps: usize,
    substeps: usize,
) -> Result<f64> {
    let ws: Vec<u8> = tau_grid
        .iter()
        .map(|&tau| scan_w(tau, init, record, n_theta, steps, substeps))
        .collect::<Result<_>>()?;
    if ws.iter().all(|&w| w == ws[0]) {
        return Err(QtError::NoFlip);
    }
    // verified monotone: exactly one 1 -> 0 flip across the window
    let mut flip: Option<usize> = None;
    for k in 0..ws.len() - 1 {
        match (ws[k], ws[k + 1]) {
            (1, 0) if flip.is_none() => flip = Some(k),
            (a, b) if a == b => {}
            _ => {
                return Err(QtError::GridTooCoarse {
                    curvature: f64::NAN,
                    boundary: f64::NAN,
                })
            }
        }
    }
    let k = flip.ok_or(QtError::NoFlip)?;
    let (mut lo, mut hi) = (tau_grid[k], tau_grid[k + 1]);
    for _ in 0..12 {
        let mid = 0.5 * (lo + hi);
        match scan_w(mid, init, record, n_theta, steps, substeps)? {
            1 => lo = mid,
            _ => hi = mid,
        }
        if hi - lo < 1e-4 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
