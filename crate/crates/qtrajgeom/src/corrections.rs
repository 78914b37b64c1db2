//! Gaussian (saddle-point) corrections to the equatorial branch
//! probabilities: reparameterized fluctuation clock, zeta-regularized free
//! determinant, Gelfand-Yaglom determinant ratios with an eigenvalue-product
//! cross-check, the corrected winding ratio R(tau), and its unit crossing
//! tau_c_eff.
//!
//! The second-variation operator comes from expanding the equatorial
//! (1D in phi) log-density rate
//!     L = -[(tau phidot / sin w - cos w)^2 + sin^2 w] / (2 tau),
//! w = 2 pi t - phi, to quadratic order around a branch. In the clock
//! u with du/dt = sin^2(w)/tau the quadratic form becomes
//! integral q (-d^2/du^2 + V(u)) q du with V = (K - Cdot) tau / sin^2 w,
//! where K and C are the (analytic) second partials of -L collected below.
//! On phi_eq everything is constant and the determinant ratio has the
//! closed form tau sinh(sqrt(4 pi^2 tau^2 + 1)/tau)/sqrt(4 pi^2 tau^2 + 1).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::action::PhasePoint;
use crate::error::{QtError, Result};
use crate::optimal::equator_n0_branch;

/// Regulator for the non-winding branch, where sin w crosses zero at
/// interior times and the raw fluctuation potential is singular: factors
/// with sin w in a denominator use sign(s) * max(|s|, SIN_CLAMP).
/// Calibrated against Monte Carlo winding statistics; must stay well
/// below the winding branch's constant |sin w| = 2 pi tau / sqrt(4 pi^2
/// tau^2 + 1) down to tau = 0.02 (~0.125) so that branch is untouched.
pub const SIN_CLAMP: f64 = 0.0225;

/// Interior grid size of the eigenvalue discretization.
const EIGEN_GRID: usize = 2048;

/// Second variation of the equatorial action around a branch, in
/// Sturm-Liouville form after the u-reparameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondVariation {
    pub tau: f64,
    pub times: Vec<f64>,
    /// reparameterized clock u(t); strictly increasing, u(0) = 0
    pub u_grid: Vec<f64>,
    pub u_t: f64,
    /// du/dt = sin^2(w)/tau, the inverse mass of the original form
    pub mass: Vec<f64>,
    /// K - dC/dt, so that V(u) = stiffness/mass
    pub stiffness: Vec<f64>,
}

impl SecondVariation {
    /// V(u) at sample i, with the mass floored by the clamp so the
    /// potential stays bounded through the sin w = 0 crossings.
    pub fn potential(&self, i: usize) -> f64 {
        self.stiffness[i] / self.mass[i].max(SIN_CLAMP * SIN_CLAMP / self.tau)
    }
}

/// Per-branch determinant bookkeeping. `log_prob` is the corrected
/// log-probability up to one global normalization shared by both branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchCorrection {
    pub action: f64,
    pub u_t: f64,
    pub det_ratio: f64,
    pub det_zeta: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub tau: f64,
    pub winding: BranchCorrection,
    pub nonwinding: BranchCorrection,
    pub r_saddle: f64,
    pub r_corrected: f64,
}

/// u(t) = (1/tau) int_0^t sin^2(2 pi t' - phi(t')) dt' by the trapezoid
/// rule on the branch grid. Returns the grid and u(T).
pub fn reparameterize_time(times: &[f64], phi: &[f64], tau: f64) -> Result<(Vec<f64>, f64)> {
    assert_eq!(times.len(), phi.len());
    let rate: Vec<f64> = times
        .iter()
        .zip(phi)
        .map(|(&t, &p)| (2.0 * PI * t - p).sin().powi(2) / tau)
        .collect();
    let mut u = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    u.push(0.0);
    for k in 1..times.len() {
        acc += 0.5 * (rate[k - 1] + rate[k]) * (times[k] - times[k - 1]);
        u.push(acc);
    }
    if !(acc > 1e-9) {
        return Err(QtError::DegenerateClock);
    }
    Ok((u, acc))
}

/// Zeta-regularized determinant of the free operator d^2/du^2 on [0, u_T].
pub fn zeta_determinant(u_t: f64) -> f64 {
    u_t.abs()
}

fn clamp_sin(s: f64, eta: f64) -> f64 {
    if s >= 0.0 {
        s.max(eta)
    } else {
        s.min(-eta)
    }
}

/// Build the second variation around an equatorial branch given by its
/// (phi, p_phi) samples on a uniform time grid. `eta` regulates the sin w
/// denominators (use [`SIN_CLAMP`]; inactive on phi_eq).
pub fn second_variation(
    times: &[f64],
    path: &[PhasePoint],
    tau: f64,
    eta: f64,
) -> Result<SecondVariation> {
    assert_eq!(times.len(), path.len());
    assert!(times.len() >= 3);
    let n = times.len();
    let mut mass = Vec::with_capacity(n);
    let mut k_term = Vec::with_capacity(n);
    let mut c_term = Vec::with_capacity(n);
    for (t, pt) in times.iter().zip(path) {
        let w = 2.0 * PI * t - pt.phi;
        let (s, c) = w.sin_cos();
        let sc = clamp_sin(s, eta);
        let p = pt.p_phi;
        let r = c + p * s;
        // second partials of -L in (w, wdot); A = r - cos w
        let a = p * s;
        let a_w = -r * s * c / (sc * sc) + s;
        let a_wd = -tau / sc;
        let a_wwd = tau * c / (sc * sc);
        let a_ww = r * s * (1.0 + c * c) / (sc * sc * sc) + c;
        c_term.push((a_w * a_wd + a * a_wwd) / tau);
        k_term.push((a_w * a_w + a * a_ww + (2.0 * w).cos()) / tau);
        mass.push(s * s / tau);
    }
    // Cdot by central differences (one-sided at the ends)
    let mut stiffness = Vec::with_capacity(n);
    for i in 0..n {
        let (j0, j1) = if i == 0 {
            (0, 1)
        } else if i == n - 1 {
            (n - 2, n - 1)
        } else {
            (i - 1, i + 1)
        };
        let cdot = (c_term[j1] - c_term[j0]) / (times[j1] - times[j0]);
        stiffness.push(k_term[i] - cdot);
    }
    let phi: Vec<f64> = path.iter().map(|p| p.phi).collect();
    let (u_grid, u_t) = reparameterize_time(times, &phi, tau)?;
    Ok(SecondVariation {
        tau,
        times: times.to_vec(),
        u_grid,
        u_t,
        mass,
        stiffness,
    })
}

/// The exact winding branch (phi_eq shifted by one rotation): phi(t) =
/// phi_e + 2 pi t with constant momentum p_phi = 2 pi tau.
pub fn winding_branch_path(tau: f64, n_steps: usize) -> (Vec<f64>, Vec<PhasePoint>) {
    let phi_e = -(2.0 * PI * tau).atan();
    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 / n_steps as f64).collect();
    let path = times
        .iter()
        .map(|&t| {
            let mut p = PhasePoint::new(phi_e + 2.0 * PI * t, PI / 2.0, 0.0);
            p.p_phi = 2.0 * PI * tau;
            p
        })
        .collect();
    (times, path)
}

/// Determinant ratio det(Sigma)/det(-d^2/du^2) by the Gelfand-Yaglom
/// method: integrate Sigma y = 0 with y(0) = 0, dy/du(0) = 1 and return
/// y(u_T)/u_T. Integrated in t (RK4 with linearly interpolated
/// coefficients), where the system ydot = mass * p, pdot = stiffness * y
/// has no singular factors.
pub fn gelfand_yaglom(sv: &SecondVariation) -> Result<f64> {
    let n = sv.times.len();
    let mut y = 0.0_f64;
    let mut p = 1.0_f64;
    for k in 0..n - 1 {
        let h = sv.times[k + 1] - sv.times[k];
        let m0 = sv.mass[k];
        let m1 = sv.mass[k + 1];
        let s0 = sv.stiffness[k];
        let s1 = sv.stiffness[k + 1];
        let mm = 0.5 * (m0 + m1);
        let sm = 0.5 * (s0 + s1);
        let f = |m: f64, s: f64, y: f64, p: f64| (m * p, s * y);
        let (k1y, k1p) = f(m0, s0, y, p);
        let (k2y, k2p) = f(mm, sm, y + 0.5 * h * k1y, p + 0.5 * h * k1p);
        let (k3y, k3p) = f(mm, sm, y + 0.5 * h * k2y, p + 0.5 * h * k2p);
        let (k4y, k4p) = f(m1, s1, y + h * k3y, p + h * k3p);
        let y_next = y + h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        let p_next = p + h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        if k > 0 && y_next < 0.0 {
            return Err(QtError::ConjugatePoint(sv.times[k + 1]));
        }
        y = y_next;
        p = p_next;
    }
    Ok(y / sv.u_t)
}

/// V resampled on a uniform u grid with m interior points, by monotone
/// inversion of u(t) and linear interpolation.
fn potential_on_uniform_u(sv: &SecondVariation, m: usize) -> Vec<f64> {
    let h = sv.u_t / (m + 1) as f64;
    let mut out = Vec::with_capacity(m);
    let mut k = 0usize;
    for j in 1..=m {
        let u = j as f64 * h;
        while k + 2 < sv.u_grid.len() && sv.u_grid[k + 1] <= u {
            k += 1;
        }
        let du = sv.u_grid[k + 1] - sv.u_grid[k];
        let w = if du > 0.0 {
            ((u - sv.u_grid[k]) / du).clamp(0.0, 1.0)
        } else {
            0.5
        };
        out.push((1.0 - w) * sv.potential(k) + w * sv.potential(k + 1));
    }
    out
}

/// Number of eigenvalues of the tridiagonal (diag d, off e) below x, by
/// the Sturm sequence of LDL^T pivots.
fn sturm_count(d: &[f64], e: f64, x: f64) -> usize {
    let mut count = 0usize;
    let mut q = f64::INFINITY;
    for &di in d {
        if q.abs() < 1e-300 {
            q = 1e-300_f64.copysign(q);
        }
        q = di - x - e * e / q;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// k-th (1-based) smallest eigenvalue by bisection on the Sturm count.
fn kth_eigenvalue(d: &[f64], e: f64, k: usize, lo0: f64, hi0: f64) -> f64 {
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if sturm_count(d, e, mid) >= k {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-13 * hi.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Determinant ratio from the N smallest Dirichlet eigenvalues of the
/// discretized Sigma and free operators. The truncated log-ratio converges
/// like c/N, so the tail over the remaining modes is summed analytically
/// with the mean spectral shift estimated from the top computed octave.
/// Errors when the N and N/2 estimates disagree by more than 1%.
pub fn eigen_det_ratio(sv: &SecondVariation, n_eigen: usize) -> Result<f64> {
    assert!(n_eigen >= 8, "need at least 8 eigenvalues");
    let m = EIGEN_GRID;
    let h = sv.u_t / (m + 1) as f64;
    let v = potential_on_uniform_u(sv, m);
    let e = -1.0 / (h * h);
    let d: Vec<f64> = v.iter().map(|&vi| 2.0 / (h * h) + vi).collect();
    let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let lo0 = vmin.min(0.0) - 1.0;
    let hi0 = 4.0 / (h * h) + v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    // eigenvalues against the discrete free spectrum so that the
    // discretization error cancels mode by mode
    let lam0 = |k: usize| (2.0 - 2.0 * (k as f64 * PI / (m + 1) as f64).cos()) / (h * h);
    let mut lam = Vec::with_capacity(n_eigen);
    for k in 1..=n_eigen {
        let l = kth_eigenvalue(&d, e, k, lo0, hi0);
        if l <= 0.0 {
            return Err(QtError::ConjugatePoint(f64::NAN));
        }
        lam.push(l);
    }
    let estimate = |n: usize| -> f64 {
        let head: f64 = (0..n).map(|i| (lam[i] / lam0(i + 1)).ln()).sum();
        // mean shift lambda_k - lambda0_k over the top computed octave
        let shift: f64 = (n / 2..n)
            .map(|i| lam[i] - lam0(i + 1))
            .sum::<f64>()
            / (n - n / 2) as f64;
        let tail: f64 = (n + 1..=m).map(|k| (1.0 + shift / lam0(k)).ln()).sum();
        head + tail
    };
    let full = estimate(n_eigen);
    let half = estimate(n_eigen / 2);
    let disagreement = (full - half).abs();
    if disagreement > 0.01 {
        return Err(QtError::NotConverged(100.0 * disagreement));
    }
    Ok(full.exp())
}

fn branch_correction(
    times: &[f64],
    path: &[PhasePoint],
    action: f64,
    tau: f64,
) -> Result<BranchCorrection> {
    let sv = second_variation(times, path, tau, SIN_CLAMP)?;
    let det_ratio = gelfand_yaglom(&sv)?;
    let det_zeta = zeta_determinant(sv.u_t);
    let log_prob = action - 0.5 * (det_ratio.ln() + det_zeta.ln());
    Ok(BranchCorrection {
        action,
        u_t: sv.u_t,
        det_ratio,
        det_zeta,
        log_prob,
    })
}

/// Corrected winding / non-winding probability ratio at Theta = pi/2:
/// each branch weighs e^S (det_ratio det_zeta)^(-1/2); the shared
/// normalization cancels in R.
pub fn corrected_transition_ratio(tau: f64, n_steps: usize) -> Result<CorrectionReport> {
    let (times_w, path_w) = winding_branch_path(tau, n_steps);
    let winding = branch_correction(&times_w, &path_w, -2.0 * PI * PI * tau, tau)?;
    let sol = equator_n0_branch(&[tau], n_steps)?.pop().expect("one tau");
    let nonwinding = branch_correction(&sol.times, &sol.path, sol.action, tau)?;
    Ok(CorrectionReport {
        tau,
        winding,
        nonwinding,
        r_saddle: (winding.action - nonwinding.action).exp(),
        r_corrected: (winding.log_prob - nonwinding.log_prob).exp(),
    })
}

/// Strength at which the corrected ratio crosses 1, by bisection of
/// log R over [0.02, 0.3].
pub fn find_tau_c_eff(n_steps: usize) -> Result<f64> {
    let f = |tau: f64| -> Result<f64> {
        let rep = corrected_transition_ratio(tau, n_steps)?;
        Ok(rep.winding.log_prob - rep.nonwinding.log_prob)
    };
    let (mut lo, mut hi) = (0.02_f64, 0.3_f64);
    let (f_lo, f_hi) = (f(lo)?, f(hi)?);
    if f_lo.signum() == f_hi.signum() {
        return Err(QtError::NoBracket);
    }
    for _ in 0..10 {
        let mid = 0.5 * (lo + hi);
        if f(mid)?.signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 5e-4 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
