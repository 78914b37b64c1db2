//! Phase-augmented stochastic action for the monitored qubit: the Hamilton
//! equations with the readout constraint, the co-rotating-frame action and
//! its equilibrium point, and the constrained Lagrangian formulation.
//!
//! Sign convention: the integrand returned here is the log-probability
//! density rate, so a path's density is exp(integral). On the equatorial
//! winding solution the integral is -2 pi^2 tau, which anchors the
//! convention.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::bloch::{mean_readout, MeasurementProtocol};
use crate::error::{QtError, Result};

/// Point of the phase-augmented phase space. Coordinates are unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub phi: f64,
    pub theta: f64,
    pub chi: f64,
    pub p_phi: f64,
    pub p_theta: f64,
    pub p_chi: f64,
}

impl PhasePoint {
    pub fn new(phi: f64, theta: f64, chi: f64) -> Self {
        PhasePoint {
            phi,
            theta,
            chi,
            p_phi: 0.0,
            p_theta: 0.0,
            p_chi: 0.0,
        }
    }
}

/// Same point seen from the frame co-rotating with the measurement axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatingPoint {
    pub phi: f64,
    pub theta: f64,
    pub p_phi: f64,
    pub p_theta: f64,
}

/// Stationary point of the co-rotating optimal dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub theta_e: f64,
    pub phi_e: f64,
}

/// The three geometric coefficient functions of the deterministic update,
/// the mean readout, and all their first partials in (theta, phi).
#[derive(Debug, Clone, Copy)]
pub struct Coefficients {
    pub f: f64,
    pub g: f64,
    pub h: f64,
    pub a: f64,
    pub df_dtheta: f64,
    pub df_dphi: f64,
    pub dg_dtheta: f64,
    pub dg_dphi: f64,
    pub dh_dtheta: f64,
    pub dh_dphi: f64,
    pub da_dtheta: f64,
    pub da_dphi: f64,
}

/// f, g, h of the spherical update equations.
pub fn fgh(theta: f64, phi: f64, axis_theta: f64, axis_phi: f64) -> Result<(f64, f64, f64)> {
    let c = coefficients(theta, phi, axis_theta, axis_phi)?;
    Ok((c.f, c.g, c.h))
}

pub fn coefficients(theta: f64, phi: f64, axis_theta: f64, axis_phi: f64) -> Result<Coefficients> {
    let sin_t = theta.sin();
    if sin_t.abs() < 1e-12 {
        return Err(QtError::SingularCoordinate(theta));
    }
    let cos_t = theta.cos();
    let (sin_at, cos_at) = (axis_theta.sin(), axis_theta.cos());
    let psi = phi - axis_phi;
    let (sin_psi, cos_psi) = (psi.sin(), psi.cos());
    let csc_t = sin_t.recip();
    let tan_half = (0.5 * theta).tan();
    let sec_half_sq = (0.5 * theta).cos().powi(-2);

    Ok(Coefficients {
        f: csc_t * sin_at * sin_psi,
        g: cos_t * sin_at * cos_psi - sin_t * cos_at,
        h: tan_half * sin_at * sin_psi,
        a: cos_t * cos_at + sin_t * sin_at * cos_psi,
        df_dtheta: -csc_t * (cos_t * csc_t) * sin_at * sin_psi,
        df_dphi: csc_t * sin_at * cos_psi,
        dg_dtheta: -sin_t * sin_at * cos_psi - cos_t * cos_at,
        dg_dphi: -cos_t * sin_at * sin_psi,
        dh_dtheta: 0.5 * sec_half_sq * sin_at * sin_psi,
        dh_dphi: tan_half * sin_at * cos_psi,
        da_dtheta: -sin_t * cos_at + cos_t * sin_at * cos_psi,
        da_dphi: -sin_t * sin_at * sin_psi,
    })
}

/// Readout extremizing the action at a phase-space point:
/// r = a + p_theta g - p_phi f + p_chi h / 2.
pub fn optimal_r(point: &PhasePoint, protocol: &MeasurementProtocol, t: f64) -> Result<f64> {
    let c = coefficients(
        point.theta,
        point.phi,
        protocol.theta_axis,
        protocol.phi_schedule(t),
    )?;
    Ok(c.a + point.p_theta * c.g - point.p_phi * c.f + 0.5 * point.p_chi * c.h)
}

/// On-shell action integrand: with the velocities supplied by the update
/// equations the momentum terms vanish, leaving (r (2a - r) - 1) / (2 tau).
pub fn action_density(
    point: &PhasePoint,
    r: f64,
    protocol: &MeasurementProtocol,
    t: f64,
) -> Result<f64> {
    let a = mean_readout(
        protocol.theta_axis,
        protocol.phi_schedule(t),
        point.theta,
        point.phi,
    );
    // fgh must be defined at the point even though only a survives
    coefficients(point.theta, point.phi, protocol.theta_axis, protocol.phi_schedule(t))?;
    Ok((r * (2.0 * a - r) - 1.0) / (2.0 * protocol.tau))
}

/// Full action integrand with explicit velocities (q = (phi, theta, chi)).
pub fn action_density_with_velocities(
    point: &PhasePoint,
    qdot: &[f64; 3],
    r: f64,
    protocol: &MeasurementProtocol,
    t: f64,
) -> Result<f64> {
    let c = coefficients(
        point.theta,
        point.phi,
        protocol.theta_axis,
        protocol.phi_schedule(t),
    )?;
    let tau = protocol.tau;
    let (phidot, thetadot, chidot) = (qdot[0], qdot[1], qdot[2]);
    Ok(-point.p_theta * (thetadot - r / tau * c.g)
        - point.p_phi * (r / tau * c.f + phidot)
        - point.p_chi * (chidot - r / (2.0 * tau) * c.h)
        + (r * (2.0 * a_of(&c) - r) - 1.0) / (2.0 * tau))
}

fn a_of(c: &Coefficients) -> f64 {
    c.a
}

/// Time derivative of (phi, theta, chi, p_phi, p_theta, p_chi) along the
/// extremal flow, with the readout eliminated by its constraint.
pub fn hamilton_rhs(
    point: &PhasePoint,
    protocol: &MeasurementProtocol,
    t: f64,
) -> Result<[f64; 6]> {
    let c = coefficients(
        point.theta,
        point.phi,
        protocol.theta_axis,
        protocol.phi_schedule(t),
    )?;
    let tau = protocol.tau;
    let r = c.a + point.p_theta * c.g - point.p_phi * c.f + 0.5 * point.p_chi * c.h;
    let phidot = -r / tau * c.f;
    let thetadot = r / tau * c.g;
    let chidot = r / (2.0 * tau) * c.h;
    let pphidot = r / tau
        * (point.p_phi * c.df_dphi
            - point.p_theta * c.dg_dphi
            - 0.5 * point.p_chi * c.dh_dphi
            - c.da_dphi);
    let pthetadot = r / tau
        * (point.p_phi * c.df_dtheta
            - point.p_theta * c.dg_dtheta
            - 0.5 * point.p_chi * c.dh_dtheta
            - c.da_dtheta);
    Ok([phidot, thetadot, chidot, pphidot, pthetadot, 0.0])
}

/// Lab -> co-rotating point transformation (phi~ = Phi(t) - phi).
pub fn corotate(point: &PhasePoint, protocol: &MeasurementProtocol, t: f64) -> RotatingPoint {
    RotatingPoint {
        phi: protocol.phi_schedule(t) - point.phi,
        theta: point.theta,
        p_phi: -point.p_phi,
        p_theta: point.p_theta,
    }
}

/// Inverse of [`corotate`]; chi and p_chi are carried through unchanged.
pub fn corotate_inv(
    rot: &RotatingPoint,
    chi: f64,
    p_chi: f64,
    protocol: &MeasurementProtocol,
    t: f64,
) -> PhasePoint {
    PhasePoint {
        phi: protocol.phi_schedule(t) - rot.phi,
        theta: rot.theta,
        chi,
        p_phi: -rot.p_phi,
        p_theta: rot.p_theta,
        p_chi,
    }
}

/// Rotating-frame coefficient functions (axis frozen at azimuth 0).
pub fn rotating_coefficients(theta: f64, phi: f64, axis_theta: f64) -> Result<Coefficients> {
    // lab functions at Phi = 0 with phi -> phi~ flip sign conventions:
    // f~ = csc(theta) sin(Theta) sin(phi~), g~, a~ as in the rotating action.
    let c = coefficients(theta, -phi, axis_theta, 0.0)?;
    Ok(Coefficients {
        f: -c.f,
        g: c.g,
        h: -c.h,
        a: c.a,
        df_dtheta: -c.df_dtheta,
        df_dphi: c.df_dphi,
        dg_dtheta: c.dg_dtheta,
        dg_dphi: -c.dg_dphi,
        dh_dtheta: -c.dh_dtheta,
        dh_dphi: c.dh_dphi,
        da_dtheta: c.da_dtheta,
        da_dphi: -c.da_dphi,
    })
}

/// Extremal flow of the rotating-frame action for the (theta~, phi~) sector.
/// The conserved geometric-phase momentum enters through the readout
/// constraint (the lab h picks up a sign under the frame flip). Returns
/// d/dt of (phi~, theta~, p_phi~, p_theta~).
pub fn rotating_hamilton_rhs(
    rot: &RotatingPoint,
    p_chi: f64,
    axis_theta: f64,
    tau: f64,
    axis_rate: f64,
) -> Result<[f64; 4]> {
    let c = rotating_coefficients(rot.theta, rot.phi, axis_theta)?;
    let r = c.a + rot.p_theta * c.g - rot.p_phi * c.f - 0.5 * p_chi * c.h;
    let phidot = axis_rate - r / tau * c.f;
    let thetadot = r / tau * c.g;
    let pphidot = -r / tau
        * (rot.p_theta * c.dg_dphi - rot.p_phi * c.df_dphi - 0.5 * p_chi * c.dh_dphi
            + c.da_dphi);
    let pthetadot = -r / tau
        * (rot.p_theta * c.dg_dtheta - rot.p_phi * c.df_dtheta - 0.5 * p_chi * c.dh_dtheta
            + c.da_dtheta);
    Ok([phidot, thetadot, pphidot, pthetadot])
}

/// Rotating-frame action integrand with explicit velocities.
pub fn rotating_action_density(
    rot: &RotatingPoint,
    qdot: &[f64; 2],
    r: f64,
    axis_theta: f64,
    tau: f64,
    axis_rate: f64,
) -> Result<f64> {
    let c = rotating_coefficients(rot.theta, rot.phi, axis_theta)?;
    let (phidot, thetadot) = (qdot[0], qdot[1]);
    Ok((2.0 * r * c.a - r * r - 1.0
        + 2.0 * rot.p_theta * (r * c.g - tau * thetadot)
        + 2.0 * rot.p_phi * (tau * (axis_rate - phidot) - r * c.f))
        / (2.0 * tau))
}

/// Closed-form equilibrium of the rotating flow, with the polar branch
/// continued through Theta = pi/2 so theta_e stays in [0, pi].
pub fn equilibrium_point(axis_theta: f64, tau: f64) -> EquilibriumPoint {
    let root = (4.0 * PI * PI * tau * tau + 1.0).sqrt();
    EquilibriumPoint {
        theta_e: axis_theta.sin().atan2(axis_theta.cos() * root),
        phi_e: -(2.0 * PI * tau).atan(),
    }
}

/// Momenta completing the equilibrium point to a fixed point of the full
/// rotating flow. Returns (p_theta~, p_phi~, p_chi): the three linear
/// stationarity conditions (both momentum rates vanish and the constrained
/// readout matches the value demanded by phi~' = 0) solved at (theta_e,
/// phi~_e). On the equator the system degenerates to a one-parameter
/// family; the p_chi = 0 member is returned there.
pub fn equilibrium_momenta(axis_theta: f64, tau: f64) -> Result<(f64, f64, f64)> {
    let eq = equilibrium_point(axis_theta, tau);
    let phi_rot = -eq.phi_e;
    let c = rotating_coefficients(eq.theta_e, phi_rot, axis_theta)?;
    let s = (4.0 * PI * PI * tau * tau + 1.0).sqrt();
    let d = (1.0 + 4.0 * PI * PI * tau * tau * axis_theta.cos().powi(2)).sqrt();
    let r_eq = s / d;
    // unknowns x = (p_theta~, p_phi~, p_chi / 2)
    let m = [
        [0.0, -c.f, -c.h],
        [c.dg_dtheta, -c.df_dtheta, -c.dh_dtheta],
        [c.dg_dphi, -c.df_dphi, -c.dh_dphi],
    ];
    let b = [r_eq - c.a, -c.da_dtheta, -c.da_dphi];
    match solve3(&m, &b) {
        Some(x) => Ok((x[0], x[1], 2.0 * x[2])),
        None => {
            // degenerate (equatorial) case: p_chi = 0 and the 2x2 system
            // in (p_theta~, p_phi~) from the momentum rates alone
            let det = c.dg_dtheta * (-c.df_dphi) - (-c.df_dtheta) * c.dg_dphi;
            if det.abs() < 1e-14 {
                return Err(QtError::SingularJacobian);
            }
            let b2 = [-c.da_dtheta, -c.da_dphi];
            let p_theta = (b2[0] * (-c.df_dphi) - (-c.df_dtheta) * b2[1]) / det;
            let p_phi = (c.dg_dtheta * b2[1] - b2[0] * c.dg_dphi) / det;
            Ok((p_theta, p_phi, 0.0))
        }
    }
}

/// 3x3 linear solve by Gaussian elimination with partial pivoting; None on
/// (near-)singular systems.
fn solve3(m: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let mut a = [[0.0; 4]; 3];
    for i in 0..3 {
        a[i][..3].copy_from_slice(&m[i]);
        a[i][3] = b[i];
    }
    let scale: f64 = m
        .iter()
        .flatten()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);
    for k in 0..3 {
        let piv = (k..3).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[piv][k].abs() < 1e-10 * scale {
            return None;
        }
        a.swap(k, piv);
        for i in (k + 1)..3 {
            let fac = a[i][k] / a[k][k];
            for j in k..4 {
                a[i][j] -= fac * a[k][j];
            }
        }
    }
    let mut x = [0.0; 3];
    for k in (0..3).rev() {
        let mut s = a[k][3];
        for j in (k + 1)..3 {
            s -= a[k][j] * x[j];
        }
        x[k] = s / a[k][k];
    }
    Some(x)
}

/// Lagrangian-formulation data at one configuration-space point.
#[derive(Debug, Clone, Copy)]
pub struct LagrangianData {
    pub lagrangian: f64,
    pub measure: f64,
    pub theta_dot: f64,
    pub chi_dot: f64,
}

/// Configuration-space Lagrangian, the pointwise functional-measure factor,
/// and the two constraint velocities eliminated by the momentum integration.
pub fn lagrangian_and_measure(
    theta: f64,
    phi: f64,
    phidot: f64,
    protocol: &MeasurementProtocol,
    t: f64,
) -> Result<LagrangianData> {
    let axis_theta = protocol.theta_axis;
    let psi = phi - protocol.phi_schedule(t);
    let (sin_psi, cos_psi) = (psi.sin(), psi.cos());
    if sin_psi.abs() < 1e-12 {
        return Err(QtError::SingularMeasure(sin_psi));
    }
    let sin_at = axis_theta.sin();
    if sin_at.abs() < 1e-12 {
        return Err(QtError::SingularMeasure(sin_at));
    }
    let tau = protocol.tau;
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let csc_psi = sin_psi.recip();
    let cot_psi = cos_psi * csc_psi;
    let cot_at = axis_theta.cos() / sin_at;

    let lagrangian = -0.5 * tau * sin_t * sin_t / (sin_at * sin_at) * phidot * phidot * csc_psi
        * csc_psi
        - 0.5 / tau
        - 0.5 * phidot * (2.0 * theta).sin() * cot_at * csc_psi
        - sin_t * sin_t * cot_psi * phidot;

    let measure = (2.0 * tau).sqrt() * sin_t.abs() / (sin_at.abs() * sin_psi.abs());

    let theta_dot = 0.5
        * phidot
        * (2.0 * sin_t * sin_t * cot_at * csc_psi - (2.0 * theta).sin() * cot_psi);
    let chi_dot = 0.5 * phidot * (cos_t - 1.0);

    Ok(LagrangianData {
        lagrangian,
        measure,
        theta_dot,
        chi_dot,
    })
}

/// Equatorial winding solution phi(t) = 2 pi t / T - arctan(2 pi tau).
pub fn phi_eq(t: f64, tau: f64, total_time: f64) -> f64 {
    2.0 * PI * t / total_time - (2.0 * PI * tau).atan()
}

/// Its extremal readout, constant along the path.
pub fn phi_eq_readout(tau: f64) -> f64 {
    (4.0 * PI * PI * tau * tau + 1.0).sqrt()
}

/// Conjugate momentum along the equatorial winding solution.
pub fn phi_eq_momentum(tau: f64) -> f64 {
    2.0 * PI * tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::MeasurementProtocol;
    use approx::assert_abs_diff_eq;

    fn proto(theta_axis: f64, tau: f64) -> MeasurementProtocol {
        MeasurementProtocol::gaussian(theta_axis, tau, 1000)
    }

    /// Independent oracle: a from the Cartesian dot product, g = da/dtheta
    /// and f = -csc^2(theta) da/dphi by finite differences, h = f (1 - cos).
    fn fgh_oracle(theta: f64, phi: f64, at: f64, ap: f64) -> (f64, f64, f64, f64) {
        let dot = |th: f64, ph: f64| {
            let x = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
            let n = [at.sin() * ap.cos(), at.sin() * ap.sin(), at.cos()];
            x[0] * n[0] + x[1] * n[1] + x[2] * n[2]
        };
        let a = dot(theta, phi);
        let e = 1e-6;
        let g = (dot(theta + e, phi) - dot(theta - e, phi)) / (2.0 * e);
        let da_dphi = (dot(theta, phi + e) - dot(theta, phi - e)) / (2.0 * e);
        let f = -da_dphi / (theta.sin() * theta.sin());
        let h = f * (1.0 - theta.cos());
        (f, g, h, a)
    }

    #[test]
    fn fgh_matches_geometry_oracle() {
        for i in 0..9 {
            for j in 0..7 {
                let theta = 0.2 + 2.7 * i as f64 / 9.0;
                let phi = -3.0 + 6.0 * j as f64 / 7.0;
                let (at, ap) = (1.3, 0.4);
                let c = coefficients(theta, phi, at, ap).unwrap();
                let (f, g, h, a) = fgh_oracle(theta, phi, at, ap);
                assert_abs_diff_eq!(c.f, f, epsilon = 1e-8);
                assert_abs_diff_eq!(c.g, g, epsilon = 1e-8);
                assert_abs_diff_eq!(c.h, h, epsilon = 1e-8);
                assert_abs_diff_eq!(c.a, a, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fgh_aligned_azimuth() {
        let (f, g, h) = fgh(0.7, 0.9, 1.5, 0.9).unwrap();
        assert_abs_diff_eq!(f, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g, (1.5f64 - 0.7).sin(), epsilon = 1e-15);
        // both terms vanish on the doubly-equatorial point
        let (_, g, _) = fgh(PI / 2.0, 0.3, PI / 2.0, 0.3).unwrap();
        assert_abs_diff_eq!(g, 0.0, epsilon = 1e-15);
        assert!(fgh(0.0, 0.0, 1.0, 0.0).is_err());
        assert!(fgh(PI, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn partials_match_finite_differences() {
        let e = 1e-6;
        for i in 0..8 {
            let theta = 0.3 + 2.4 * i as f64 / 8.0;
            let phi = 0.9 - 0.37 * i as f64;
            let (at, ap) = (1.1, 2.2);
            let c = coefficients(theta, phi, at, ap).unwrap();
            let cp = coefficients(theta + e, phi, at, ap).unwrap();
            let cm = coefficients(theta - e, phi, at, ap).unwrap();
            let cq = coefficients(theta, phi + e, at, ap).unwrap();
            let cr = coefficients(theta, phi - e, at, ap).unwrap();
            let pairs = [
                (c.df_dtheta, (cp.f - cm.f) / (2.0 * e)),
                (c.dg_dtheta, (cp.g - cm.g) / (2.0 * e)),
                (c.dh_dtheta, (cp.h - cm.h) / (2.0 * e)),
                (c.da_dtheta, (cp.a - cm.a) / (2.0 * e)),
                (c.df_dphi, (cq.f - cr.f) / (2.0 * e)),
                (c.dg_dphi, (cq.g - cr.g) / (2.0 * e)),
                (c.dh_dphi, (cq.h - cr.h) / (2.0 * e)),
                (c.da_dphi, (cq.a - cr.a) / (2.0 * e)),
            ];
            for (analytic, fd) in pairs {
                let scale = analytic.abs().max(1.0);
                assert!(
                    (analytic - fd).abs() / scale < 1e-6,
                    "partial mismatch {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn optimal_r_extremizes_density() {
        let p = proto(1.2, 0.17);
        let point = PhasePoint {
            phi: 0.8,
            theta: 1.9,
            chi: 0.0,
            p_phi: 0.35,
            p_theta: -0.6,
            p_chi: 0.2,
        };
        let t = 0.3;
        let r_star = optimal_r(&point, &p, t).unwrap();
        // golden-section maximization of the full density over r
        let dens = |r: f64| {
            action_density_with_velocities(&point, &[0.0, 0.0, 0.0], r, &p, t).unwrap()
        };
        let (mut lo, mut hi) = (r_star - 5.0, r_star + 5.0);
        let gr = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..120 {
            let x1 = hi - gr * (hi - lo);
            let x2 = lo + gr * (hi - lo);
            if dens(x1) < dens(x2) {
                lo = x1;
            } else {
                hi = x2;
            }
        }
        let numeric = 0.5 * (lo + hi);
        assert_abs_diff_eq!(numeric, r_star, epsilon = 1e-8);

        // p = 0 reduces to the mean readout
        let point0 = PhasePoint::new(0.8, 1.9, 0.0);
        let a = mean_readout(p.theta_axis, p.phi_schedule(t), 1.9, 0.8);
        assert_abs_diff_eq!(optimal_r(&point0, &p, t).unwrap(), a, epsilon = 1e-14);
    }

    #[test]
    fn onshell_density_anchors() {
        let p = proto(PI / 2.0, 0.1);
        // p = 0, r = a
        let point = PhasePoint::new(0.4, 1.1, 0.0);
        let t = 0.2;
        let a = mean_readout(p.theta_axis, p.phi_schedule(t), 1.1, 0.4);
        assert_abs_diff_eq!(
            action_density(&point, a, &p, t).unwrap(),
            (a * a - 1.0) / (2.0 * p.tau),
            epsilon = 1e-14
        );
        // axis tracking costs nothing
        let on_axis = PhasePoint::new(p.phi_schedule(t), PI / 2.0, 0.0);
        assert_abs_diff_eq!(action_density(&on_axis, 1.0, &p, t).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn phi_eq_action_integral_is_minus_two_pi_sq_tau() {
        for &tau in &[0.05, 0.1, 0.2] {
            let p = proto(PI / 2.0, tau);
            let r = phi_eq_readout(tau);
            let n = 20000;
            let h = 1.0 / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let t = i as f64 * h;
                let point = PhasePoint::new(phi_eq(t, tau, 1.0), PI / 2.0, 0.0);
                let v = action_density(&point, r, &p, t).unwrap();
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                acc += w * v * h;
            }
            assert_abs_diff_eq!(acc, -2.0 * PI * PI * tau, epsilon = 1e-8);
        }
    }

    #[test]
    fn p_chi_is_conserved() {
        let p = proto(1.0, 0.12);
        let mut y = PhasePoint {
            phi: 0.1,
            theta: 1.4,
            chi: 0.0,
            p_phi: 0.2,
            p_theta: -0.1,
            p_chi: 0.7,
        };
        let n = 4000;
        let h = 1.0 / n as f64;
        for k in 0..n {
            let t = k as f64 * h;
            y = rk4_step(&y, &p, t, h);
        }
        assert_abs_diff_eq!(y.p_chi, 0.7, epsilon = 1e-12);
    }

    fn rk4_step(y: &PhasePoint, p: &MeasurementProtocol, t: f64, h: f64) -> PhasePoint {
        let pack = |y: &PhasePoint| [y.phi, y.theta, y.chi, y.p_phi, y.p_theta, y.p_chi];
        let unpack = |v: [f64; 6]| PhasePoint {
            phi: v[0],
            theta: v[1],
            chi: v[2],
            p_phi: v[3],
            p_theta: v[4],
            p_chi: v[5],
        };
        let deriv = |v: [f64; 6], tt: f64| {
            let q = unpack(v);
            let d = hamilton_rhs(&q, p, tt).unwrap();
            [d[0], d[1], d[2], d[3], d[4], d[5]]
        };
        let y0 = pack(y);
        let k1 = deriv(y0, t);
        let add = |a: [f64; 6], b: [f64; 6], s: f64| {
            let mut o = a;
            for i in 0..6 {
                o[i] += s * b[i];
            }
            o
        };
        let k2 = deriv(add(y0, k1, 0.5 * h), t + 0.5 * h);
        let k3 = deriv(add(y0, k2, 0.5 * h), t + 0.5 * h);
        let k4 = deriv(add(y0, k3, h), t + h);
        let mut out = y0;
        for i in 0..6 {
            out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        unpack(out)
    }

    #[test]
    fn corotate_roundtrip_and_phi_eq_image() {
        let p = proto(1.3, 0.21);
        let point = PhasePoint {
            phi: 2.4,
            theta: 0.8,
            chi: -0.3,
            p_phi: 0.5,
            p_theta: -1.1,
            p_chi: 0.0,
        };
        let t = 0.37;
        let rot = corotate(&point, &p, t);
        let back = corotate_inv(&rot, point.chi, point.p_chi, &p, t);
        assert_abs_diff_eq!(back.phi, point.phi, epsilon = 1e-14);
        assert_abs_diff_eq!(back.p_phi, point.p_phi, epsilon = 1e-14);
        assert_abs_diff_eq!(back.theta, point.theta, epsilon = 1e-14);

        // t = 0 sends phi to -phi
        let rot0 = corotate(&point, &p, 0.0);
        assert_abs_diff_eq!(rot0.phi, -point.phi, epsilon = 1e-14);

        // the lab winding solution is stationary in the rotating frame
        let tau = p.tau;
        for &t in &[0.0, 0.21, 0.77, 1.0] {
            let lab = PhasePoint::new(phi_eq(t, tau, 1.0), PI / 2.0, 0.0);
            let rot = corotate(&lab, &p, t);
            assert_abs_diff_eq!(rot.phi, (2.0 * PI * tau).atan(), epsilon = 1e-12);
        }
    }

    #[test]
    fn equilibrium_point_limits_and_values() {
        // tau -> 0 recovers the axis
        let eq = equilibrium_point(1.1, 1e-9);
        assert_abs_diff_eq!(eq.theta_e, 1.1, epsilon = 1e-8);
        assert_abs_diff_eq!(eq.phi_e, 0.0, epsilon = 1e-8);
        // evaluated closed form at tau = 0.1
        let eq = equilibrium_point(PI / 2.0, 0.1);
        assert_abs_diff_eq!(eq.phi_e, -0.5609821161086238_f64, epsilon = 1e-12);
        assert_abs_diff_eq!(eq.theta_e, PI / 2.0, epsilon = 1e-12);
        // branch continuity across the equator
        let below = equilibrium_point(PI / 2.0 - 1e-6, 0.3);
        let above = equilibrium_point(PI / 2.0 + 1e-6, 0.3);
        assert!((below.theta_e - above.theta_e).abs() < 1e-5);
        assert!(above.theta_e > PI / 2.0 && below.theta_e < PI / 2.0);
    }

    #[test]
    fn equilibrium_is_fixed_point_of_rotating_flow() {
        for i in 0..10 {
            for j in 0..10 {
                let axis_theta = PI * (i as f64 + 0.5) / 10.0;
                let tau = 0.05 + 0.1 * j as f64;
                let eq = equilibrium_point(axis_theta, tau);
                let (p_theta, p_phi, p_chi) = equilibrium_momenta(axis_theta, tau).unwrap();
                let rot = RotatingPoint {
                    phi: -eq.phi_e,
                    theta: eq.theta_e,
                    p_phi,
                    p_theta,
                };
                let rhs =
                    rotating_hamilton_rhs(&rot, p_chi, axis_theta, tau, 2.0 * PI).unwrap();
                for (k, v) in rhs.iter().enumerate() {
                    assert!(
                        v.abs() < 1e-10,
                        "Theta={axis_theta} tau={tau}: rhs[{k}] = {v:e}"
                    );
                }
            }
        }
        // the degenerate equatorial member
        let (p_theta, p_phi, p_chi) = equilibrium_momenta(PI / 2.0, 0.1).unwrap();
        assert_abs_diff_eq!(p_theta, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p_phi, -0.2 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(p_chi, 0.0, epsilon = 1e-15);
        let rot = RotatingPoint {
            phi: (0.2 * PI).atan(),
            theta: PI / 2.0,
            p_phi,
            p_theta,
        };
        let rhs = rotating_hamilton_rhs(&rot, p_chi, PI / 2.0, 0.1, 2.0 * PI).unwrap();
        for v in rhs {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn rotating_density_matches_lab_density() {
        let p = proto(1.2, 0.18);
        for i in 0..14 {
            let t = 0.07 * i as f64;
            let point = PhasePoint {
                phi: 0.3 + 0.4 * i as f64,
                theta: 0.5 + 0.15 * i as f64 % 2.0,
                chi: 0.0,
                p_phi: 0.2 - 0.05 * i as f64,
                p_theta: 0.4,
                p_chi: 0.0,
            };
            let r = 0.9 - 0.1 * i as f64;
            let qdot = [1.7, -0.4, 0.0];
            let lab = action_density_with_velocities(&point, &qdot, r, &p, t).unwrap();
            let rot = corotate(&point, &p, t);
            // phi~' = Phi' - phi', theta~' = theta'
            let rot_qdot = [2.0 * PI - qdot[0], qdot[1]];
            let rotv =
                rotating_action_density(&rot, &rot_qdot, r, p.theta_axis, p.tau, 2.0 * PI)
                    .unwrap();
            assert_abs_diff_eq!(lab, rotv, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotating_density_equilibrium_anchor() {
        for &(axis_theta, tau) in &[(1.0, 0.1), (0.7, 0.25), (PI / 2.0, 0.1)] {
            let eq = equilibrium_point(axis_theta, tau);
            let (p_theta, p_phi, p_chi) = equilibrium_momenta(axis_theta, tau).unwrap();
            let rot = RotatingPoint {
                phi: -eq.phi_e,
                theta: eq.theta_e,
                p_phi,
                p_theta,
            };
            let c = rotating_coefficients(rot.theta, rot.phi, axis_theta).unwrap();
            let r = c.a + rot.p_theta * c.g - rot.p_phi * c.f - 0.5 * p_chi * c.h;
            let v = rotating_action_density(&rot, &[0.0, 0.0], r, axis_theta, tau, 2.0 * PI)
                .unwrap();
            let tt = 2.0 * PI * PI * tau * tau;
            let expected = -2.0 * PI * PI * tau * axis_theta.sin().powi(2)
                / (tt * (2.0 * axis_theta).cos() + tt + 1.0);
            assert_abs_diff_eq!(v, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn lagrangian_matches_onshell_hamiltonian_density() {
        let p = proto(1.15, 0.2);
        for i in 0..10 {
            let t = 0.09 * i as f64 + 0.01;
            let theta = 0.6 + 0.2 * (i % 5) as f64;
            let phi = p.phi_schedule(t) + 0.4 + 0.11 * i as f64; // keep away from the measure singularity
            let phidot = 1.3 - 0.2 * i as f64;
            let lag = lagrangian_and_measure(theta, phi, phidot, &p, t).unwrap();
            // eliminate r via phi' = -(r/tau) f, use constrained theta'
            let c = coefficients(theta, phi, p.theta_axis, p.phi_schedule(t)).unwrap();
            let r = -p.tau * phidot / c.f;
            let thetadot = r / p.tau * c.g;
            assert_abs_diff_eq!(lag.theta_dot, thetadot, epsilon = 1e-10);
            let ham = (r * (2.0 * c.a - r) - 1.0) / (2.0 * p.tau);
            assert_abs_diff_eq!(lag.lagrangian, ham, epsilon = 1e-8);
        }
    }

    #[test]
    fn chi_constraint_on_equator() {
        let p = proto(PI / 2.0, 0.1);
        let lag = lagrangian_and_measure(PI / 2.0, 1.0, 0.8, &p, 0.05).unwrap();
        assert_abs_diff_eq!(lag.chi_dot, -0.4, epsilon = 1e-14);
    }

    #[test]
    fn lagrangian_integral_on_phi_eq() {
        for &tau in &[0.05, 0.1, 0.2] {
            let p = proto(PI / 2.0, tau);
            let n = 20000;
            let h = 1.0 / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let t = i as f64 * h;
                let lag =
                    lagrangian_and_measure(PI / 2.0, phi_eq(t, tau, 1.0), 2.0 * PI, &p, t)
                        .unwrap();
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                acc += w * lag.lagrangian * h;
            }
            assert_abs_diff_eq!(acc, -2.0 * PI * PI * tau, epsilon = 1e-8);
        }
    }

    #[test]
    fn measure_diverges_on_axis_azimuth() {
        let p = proto(PI / 2.0, 0.1);
        let err = lagrangian_and_measure(PI / 2.0, p.phi_schedule(0.3), 1.0, &p, 0.3);
        assert!(matches!(err, Err(QtError::SingularMeasure(_))));
    }

    /// Gauge shift of chi(0) moves chi(T) by the same constant and leaves
    /// action values unchanged.
    #[test]
    fn gauge_shift_invariance() {
        let p = proto(1.0, 0.15);
        let point = PhasePoint {
            phi: 0.4,
            theta: 1.2,
            chi: 0.0,
            p_phi: 0.1,
            p_theta: 0.2,
            p_chi: 0.0,
        };
        let shifted = PhasePoint { chi: 1.9, ..point };
        let t = 0.4;
        let r = optimal_r(&point, &p, t).unwrap();
        assert_abs_diff_eq!(
            action_density(&point, r, &p, t).unwrap(),
            action_density(&shifted, r, &p, t).unwrap(),
            epsilon = 1e-15
        );
        let d0 = hamilton_rhs(&point, &p, t).unwrap();
        let d1 = hamilton_rhs(&shifted, &p, t).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(d0[i], d1[i], epsilon = 1e-15);
        }
    }
}
