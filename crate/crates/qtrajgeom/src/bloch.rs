//! Pure-qubit state bookkeeping and the rotating-axis Gaussian measurement
//! model: Kraus operators, exact readout sampling, state update with global
//! phase tracking, and the binary null-type comparison model.
//!
//! The state is stored as `(theta, phi, chi)` with `phi` and `chi` kept
//! unwrapped so winding numbers survive a full protocol. The spinor is
//! `e^{i chi} (cos(theta/2), e^{i phi} sin(theta/2))`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{QtError, Result};

pub type C64 = Complex64;

/// Wrap an angle difference into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// 2x2 complex matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[C64; 2]; 2]);

impl Mat2 {
    pub fn identity() -> Self {
        Mat2([
            [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        ])
    }

    pub fn diag(a: C64, b: C64) -> Self {
        Mat2([[a, C64::new(0.0, 0.0)], [C64::new(0.0, 0.0), b]])
    }

    pub fn adjoint(&self) -> Self {
        Mat2([
            [self.0[0][0].conj(), self.0[1][0].conj()],
            [self.0[0][1].conj(), self.0[1][1].conj()],
        ])
    }

    pub fn mul(&self, rhs: &Mat2) -> Self {
        let mut out = [[C64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = self.0[i][0] * rhs.0[0][j] + self.0[i][1] * rhs.0[1][j];
            }
        }
        Mat2(out)
    }

    pub fn apply(&self, v: &[C64; 2]) -> [C64; 2] {
        [
            self.0[0][0] * v[0] + self.0[0][1] * v[1],
            self.0[1][0] * v[0] + self.0[1][1] * v[1],
        ]
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.0;
        for row in out.iter_mut() {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        Mat2(out)
    }

    pub fn sub(&self, rhs: &Mat2) -> Self {
        let mut out = self.0;
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] -= rhs.0[i][j];
            }
        }
        Mat2(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|x| x.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

/// Pure qubit state: polar angle in [0, pi], unwrapped azimuth, unwrapped
/// accumulated global phase. `chi = 0` on every freshly initialized
/// trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub theta: f64,
    pub phi: f64,
    pub chi: f64,
}

impl BlochState {
    pub fn new(theta: f64, phi: f64) -> Self {
        BlochState {
            theta,
            phi,
            chi: 0.0,
        }
    }

    pub fn spinor(&self) -> [C64; 2] {
        let half = 0.5 * self.theta;
        let g = C64::from_polar(1.0, self.chi);
        [
            g * half.cos(),
            g * C64::from_polar(half.sin(), self.phi),
        ]
    }

    /// Cartesian Bloch vector.
    pub fn bloch_vector(&self) -> [f64; 3] {
        [
            self.theta.sin() * self.phi.cos(),
            self.theta.sin() * self.phi.sin(),
            self.theta.cos(),
        ]
    }

    /// Rebuild the tracked coordinates from a (normalized) spinor, keeping
    /// `phi` and `chi` on the branch continuous with `prev`. The global
    /// phase is read from the larger spinor component so neither chart is
    /// ever evaluated at a vanishing amplitude.
    pub fn from_spinor_tracked(spinor: &[C64; 2], prev: &BlochState) -> Result<Self> {
        let (m0, m1) = (spinor[0].norm(), spinor[1].norm());
        if m0 < 1e-14 && m1 < 1e-14 {
            return Err(QtError::DegenerateState);
        }
        let theta = 2.0 * m1.atan2(m0);
        let phi = if m0 < 1e-14 || m1 < 1e-14 {
            // azimuth undefined at a pole; hold the previous value
            prev.phi
        } else {
            let raw = spinor[1].arg() - spinor[0].arg();
            prev.phi + wrap_angle(raw - prev.phi)
        };
        let chi_raw = if theta <= 0.5 * PI {
            spinor[0].arg()
        } else {
            spinor[1].arg() - phi
        };
        let chi = prev.chi + wrap_angle(chi_raw - prev.chi);
        Ok(BlochState { theta, phi, chi })
    }

    pub fn overlap(&self, other: &BlochState) -> C64 {
        let a = self.spinor();
        let b = other.spinor();
        a[0].conj() * b[0] + a[1].conj() * b[1]
    }
}

/// Measurement axis at one instant: latitude `theta` (the protocol constant
/// Theta) and azimuth `phi` (the schedule value Phi(t)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementAxis {
    pub theta: f64,
    pub phi: f64,
}

impl MeasurementAxis {
    pub fn unit_vector(&self) -> [f64; 3] {
        [
            self.theta.sin() * self.phi.cos(),
            self.theta.sin() * self.phi.sin(),
            self.theta.cos(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeasurementVariant {
    Gaussian,
    NullType { c: f64 },
}

/// Protocol parameters: axis latitude Theta, inverse measurement strength
/// tau (units of T), total time T, step count N. The axis azimuth schedule
/// is Phi(t) = 2 pi t / T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementProtocol {
    pub theta_axis: f64,
    pub tau: f64,
    pub total_time: f64,
    pub steps: usize,
    pub variant: MeasurementVariant,
}

impl MeasurementProtocol {
    pub fn gaussian(theta_axis: f64, tau: f64, steps: usize) -> Self {
        MeasurementProtocol {
            theta_axis,
            tau,
            total_time: 1.0,
            steps,
            variant: MeasurementVariant::Gaussian,
        }
    }

    pub fn dt(&self) -> f64 {
        self.total_time / self.steps as f64
    }

    pub fn phi_schedule(&self, t: f64) -> f64 {
        2.0 * PI * t / self.total_time
    }

    pub fn axis_at(&self, t: f64) -> MeasurementAxis {
        MeasurementAxis {
            theta: self.theta_axis,
            phi: self.phi_schedule(t),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.steps < 2 {
            return Err(format!("step count N = {} must be >= 2", self.steps));
        }
        if !(self.tau > 0.0) {
            return Err(format!("tau = {} must be > 0", self.tau));
        }
        if !(self.total_time > 0.0) {
            return Err(format!("T = {} must be > 0", self.total_time));
        }
        if !(0.0..=PI).contains(&self.theta_axis) {
            return Err(format!("Theta = {} outside [0, pi]", self.theta_axis));
        }
        if let MeasurementVariant::NullType { c } = self.variant {
            let x = 4.0 * c * self.dt() / self.total_time;
            if x > 1.0 {
                return Err(format!("4 c dt / T = {x} > 1"));
            }
        }
        Ok(())
    }
}

/// Outcome of one measurement step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub readout: f64,
    pub weight: f64,
    pub next_state: BlochState,
}

/// Mean readout a = cos(theta) cos(Theta) + sin(theta) sin(Theta) cos(phi - Phi).
pub fn mean_readout(axis_theta: f64, axis_phi: f64, theta: f64, phi: f64) -> f64 {
    theta.cos() * axis_theta.cos() + theta.sin() * axis_theta.sin() * (phi - axis_phi).cos()
}

/// Unitary taking the Bloch state (theta, phi) to |0>.
pub fn rotation_to_axis(theta: f64, phi: f64) -> Mat2 {
    let (c, s) = ((0.5 * theta).cos(), (0.5 * theta).sin());
    Mat2([
        [C64::new(c, 0.0), C64::from_polar(s, -phi)],
        [-C64::from_polar(s, phi), C64::new(c, 0.0)],
    ])
}

/// Gaussian Kraus operator E(r) = R(n)^dagger M_dt(r) R(n). Hermitian and
/// positive; integrates to the identity POVM over r.
pub fn kraus_operator(r: f64, axis: &MeasurementAxis, dt: f64, tau: f64) -> Mat2 {
    let norm = (dt / (2.0 * PI * tau)).powf(0.25);
    let m = Mat2::diag(
        C64::new(norm * (-dt * (r - 1.0) * (r - 1.0) / (4.0 * tau)).exp(), 0.0),
        C64::new(norm * (-dt * (r + 1.0) * (r + 1.0) / (4.0 * tau)).exp(), 0.0),
    );
    let rot = rotation_to_axis(axis.theta, axis.phi);
    rot.adjoint().mul(&m).mul(&rot)
}

/// Null-type Kraus pair of the binary comparison model; `j = 1` is the
/// quasi-continuous outcome, `j = 0` the jump.
pub fn null_kraus(j: u8, c: f64, dt: f64, total_time: f64) -> Result<Mat2> {
    let x = 4.0 * c * dt / total_time;
    if x > 1.0 {
        return Err(QtError::InvalidStrength(x));
    }
    let zero = C64::new(0.0, 0.0);
    Ok(match j {
        1 => Mat2::diag(C64::new(1.0, 0.0), C64::new((1.0 - x).sqrt(), 0.0)),
        _ => Mat2::diag(zero, C64::new(x.sqrt(), 0.0)),
    })
}

/// Axis-frame null-type Kraus, rotated like the Gaussian one.
pub fn null_kraus_on_axis(j: u8, c: f64, dt: f64, total_time: f64, axis: &MeasurementAxis) -> Result<Mat2> {
    let m = null_kraus(j, c, dt, total_time)?;
    let rot = rotation_to_axis(axis.theta, axis.phi);
    Ok(rot.adjoint().mul(&m).mul(&rot))
}

/// Draw a readout from the exact distribution Tr[E^dag E rho]: the mixture
/// p+ N(+1, tau/dt) + p- N(-1, tau/dt) with p+- = (1 +- a)/2.
pub fn sample_readout<R: rand::Rng + ?Sized>(
    state: &BlochState,
    axis: &MeasurementAxis,
    dt: f64,
    tau: f64,
    rng: &mut R,
) -> f64 {
    let a = mean_readout(axis.theta, axis.phi, state.theta, state.phi);
    let p_plus = 0.5 * (1.0 + a);
    let mean = if rng.random::<f64>() < p_plus { 1.0 } else { -1.0 };
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    mean + (tau / dt).sqrt() * z
}

/// Apply the Gaussian Kraus for readout `r`, renormalize, and re-extract
/// the tracked coordinates. The weight is the readout density <E^dag E>.
pub fn apply_kraus(
    state: &BlochState,
    r: f64,
    axis: &MeasurementAxis,
    dt: f64,
    tau: f64,
) -> Result<StepOutcome> {
    let e = kraus_operator(r, axis, dt, tau);
    apply_operator(state, &e, r)
}

/// Apply an arbitrary (sub-normalized) operator as a measurement update.
pub fn apply_operator(state: &BlochState, op: &Mat2, readout: f64) -> Result<StepOutcome> {
    let v = op.apply(&state.spinor());
    let weight = v[0].norm_sqr() + v[1].norm_sqr();
    if weight < 1e-300 {
        return Err(QtError::DegenerateState);
    }
    let inv = weight.sqrt().recip();
    let normalized = [v[0] * inv, v[1] * inv];
    let next_state = BlochState::from_spinor_tracked(&normalized, state)?;
    Ok(StepOutcome {
        readout,
        weight,
        next_state,
    })
}
