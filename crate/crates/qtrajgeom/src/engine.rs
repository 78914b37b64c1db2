//! Monte Carlo trajectory engine: sampled ensembles, fixed-record and
//! greedy (most-likely readout) propagation, and self-closing
//! post-selection statistics.
//!
//! Every trajectory owns an RNG substream derived from (seed, index), so
//! ensembles are bit-reproducible regardless of how the work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::action::coefficients;
use crate::bloch::{
    apply_kraus, apply_operator, mean_readout, null_kraus_on_axis, sample_readout, BlochState,
    MeasurementProtocol, MeasurementVariant,
};
use crate::error::{QtError, Result};
use crate::par::par_map;

/// Distance from a pole below which coordinate-ODE stepping hands off to
/// spinor stepping.
const POLE_MARGIN: f64 = 1e-3;

/// One complete monitored trajectory on the time grid of the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<BlochState>,
    pub readouts: Vec<f64>,
    pub log_weight: f64,
    pub phi_unwrapped_final: f64,
    /// Filled in by the geometry layer for self-closed trajectories.
    pub geometric_phase: Option<f64>,
}

impl TrajectoryRecord {
    fn from_parts(times: Vec<f64>, states: Vec<BlochState>, readouts: Vec<f64>, log_weight: f64) -> Self {
        let phi_final = states.last().expect("nonempty state grid").phi;
        TrajectoryRecord {
            times,
            states,
            readouts,
            log_weight,
            phi_unwrapped_final: phi_final,
            geometric_phase: None,
        }
    }

    pub fn final_state(&self) -> &BlochState {
        self.states.last().expect("nonempty state grid")
    }
}

/// Readout supplied to [`propagate_with_record`].
pub enum RecordMode<'a> {
    /// Most likely outcome at every instant: r = a(theta, phi, t).
    Greedy,
    /// Externally post-selected record r(t).
    Fixed(&'a (dyn Fn(f64) -> f64 + Sync)),
}

/// Per-trajectory reductions of an ensemble run plus the phi_final
/// histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n_traj: usize,
    pub seed: u64,
    pub phi_init: f64,
    pub bin_width: f64,
    pub phi_final: Vec<f64>,
    pub chi_final: Vec<f64>,
    pub log_weight: Vec<f64>,
    /// (bin center, count), sorted by center; counts sum to n_traj.
    pub histogram: Vec<(f64, usize)>,
}

/// Post-selection fractions of self-closing outcomes and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfClosingStats {
    pub p_winding: f64,
    pub p_nonwinding: f64,
    pub r_empirical: f64,
    pub n_winding: usize,
    pub n_nonwinding: usize,
}

/// RNG for trajectory `index` of an ensemble seeded with `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Exact log readout density ln <E(r)^dag E(r)> for the Gaussian model:
/// mixture of N(+-1, tau/dt) weighted by (1 +- a)/2.
pub fn log_readout_density(r: f64, a: f64, dt: f64, tau: f64) -> f64 {
    let norm = 0.5 * (dt / (2.0 * std::f64::consts::PI * tau)).ln();
    let lp = -dt * (r - 1.0) * (r - 1.0) / (2.0 * tau);
    let lm = -dt * (r + 1.0) * (r + 1.0) / (2.0 * tau);
    // log-sum-exp of the two mixture components
    let (hi, lo, whi, wlo) = if lp >= lm {
        (lp, lm, 0.5 * (1.0 + a), 0.5 * (1.0 - a))
    } else {
        (lm, lp, 0.5 * (1.0 - a), 0.5 * (1.0 + a))
    };
    norm + hi + (whi + wlo * (lo - hi).exp()).ln()
}

/// Sample one full trajectory by drawing readouts from the exact
/// distribution and applying the corresponding Kraus update.
pub fn propagate_sampled<R: rand::Rng + ?Sized>(
    protocol: &MeasurementProtocol,
    init: &BlochState,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    let n = protocol.steps;
    let dt = protocol.dt();
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut readouts = Vec::with_capacity(n);
    let mut log_weight = 0.0;
    let mut state = *init;
    times.push(0.0);
    states.push(state);
    for k in 0..n {
        let t = k as f64 * dt;
        let axis = protocol.axis_at(t);
        let outcome = match protocol.variant {
            MeasurementVariant::Gaussian => {
                let r = sample_readout(&state, &axis, dt, protocol.tau, rng);
                apply_kraus(&state, r, &axis, dt, protocol.tau)?
            }
            MeasurementVariant::NullType { c } => {
                let spinor = state.spinor();
                let e1 = null_kraus_on_axis(1, c, dt, protocol.total_time, &axis)?;
                let v = e1.apply(&spinor);
                let p1 = v[0].norm_sqr() + v[1].norm_sqr();
                let j = if rng.random::<f64>() < p1 { 1 } else { 0 };
                let ej = null_kraus_on_axis(j, c, dt, protocol.total_time, &axis)?;
                apply_operator(&state, &ej, j as f64)?
            }
        };
        log_weight += outcome.weight.ln();
        state = outcome.next_state;
        times.push((k + 1) as f64 * dt);
        states.push(state);
        readouts.push(outcome.readout);
    }
    Ok(TrajectoryRecord::from_parts(times, states, readouts, log_weight))
}

fn spherical_rhs(
    theta: f64,
    phi: f64,
    r: f64,
    protocol: &MeasurementProtocol,
    t: f64,
) -> Result<[f64; 3]> {
    let c = coefficients(theta, phi, protocol.theta_axis, protocol.phi_schedule(t))?;
    let s = r / protocol.tau;
    Ok([s * c.g, -s * c.f, 0.5 * s * c.h])
}

/// Propagate a fixed or greedy record by RK4 on the coordinate ODEs, with
/// `substeps` integration substeps per measurement step. Within the pole
/// margin the step falls back to exact spinor (Kraus) stepping, where the
/// csc(theta) singularity is absent.
pub fn propagate_with_record(
    protocol: &MeasurementProtocol,
    init: &BlochState,
    mode: &RecordMode<'_>,
    substeps: usize,
) -> Result<TrajectoryRecord> {
    let n = protocol.steps;
    let dt = protocol.dt();
    let sub = substeps.max(1);
    let h = dt / sub as f64;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut readouts = Vec::with_capacity(n);
    let mut log_weight = 0.0;
    let mut state = *init;
    times.push(0.0);
    states.push(state);

    let r_at = |t: f64, theta: f64, phi: f64| -> f64 {
        match mode {
            RecordMode::Greedy => {
                mean_readout(protocol.theta_axis, protocol.phi_schedule(t), theta, phi)
            }
            RecordMode::Fixed(f) => f(t),
        }
    };

    for k in 0..n {
        let t0 = k as f64 * dt;
        let r_step = r_at(t0, state.theta, state.phi);
        let a0 = mean_readout(
            protocol.theta_axis,
            protocol.phi_schedule(t0),
            state.theta,
            state.phi,
        );
        log_weight += log_readout_density(r_step, a0, dt, protocol.tau);
        readouts.push(r_step);

        if state.theta < POLE_MARGIN || state.theta > std::f64::consts::PI - POLE_MARGIN {
            // exact spinor step with the record frozen over the interval
            let axis = protocol.axis_at(t0);
            let outcome = apply_kraus(&state, r_step, &axis, dt, protocol.tau)?;
            state = outcome.next_state;
        } else {
            let mut y = [state.theta, state.phi, state.chi];
            for s in 0..sub {
                let ts = t0 + s as f64 * h;
                let deriv = |y: &[f64; 3], tt: f64| -> Result<[f64; 3]> {
                    let r = r_at(tt, y[0], y[1]);
                    spherical_rhs(y[0], y[1], r, protocol, tt)
                };
                let k1 = deriv(&y, ts)?;
                let y2 = add3(&y, &k1, 0.5 * h);
                let k2 = deriv(&y2, ts + 0.5 * h)?;
                let y3 = add3(&y, &k2, 0.5 * h);
                let k3 = deriv(&y3, ts + 0.5 * h)?;
                let y4 = add3(&y, &k3, h);
                let k4 = deriv(&y4, ts + h)?;
                for i in 0..3 {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            state = BlochState {
                theta: y[0],
                phi: y[1],
                chi: y[2],
            };
        }
        times.push((k + 1) as f64 * dt);
        states.push(state);
    }
    Ok(TrajectoryRecord::from_parts(times, states, readouts, log_weight))
}

fn add3(a: &[f64; 3], b: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

/// Fixed-record propagation by exact per-step Kraus updates; the logged
/// weight is exactly the product of per-step readout densities.
pub fn propagate_fixed_kraus(
    protocol: &MeasurementProtocol,
    init: &BlochState,
    record: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<TrajectoryRecord> {
    let n = protocol.steps;
    let dt = protocol.dt();
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut readouts = Vec::with_capacity(n);
    let mut log_weight = 0.0;
    let mut state = *init;
    times.push(0.0);
    states.push(state);
    for k in 0..n {
        let t = k as f64 * dt;
        let r = record(t);
        let axis = protocol.axis_at(t);
        let outcome = apply_kraus(&state, r, &axis, dt, protocol.tau)?;
        log_weight += outcome.weight.ln();
        state = outcome.next_state;
        times.push((k + 1) as f64 * dt);
        states.push(state);
        readouts.push(r);
    }
    Ok(TrajectoryRecord::from_parts(times, states, readouts, log_weight))
}

/// Run `n_traj` independent sampled trajectories and reduce to finals plus
/// a phi_final histogram with the given bin width.
pub fn run_ensemble(
    protocol: &MeasurementProtocol,
    init: &BlochState,
    n_traj: usize,
    seed: u64,
    bin_width: f64,
) -> Result<EnsembleSummary> {
    assert!(n_traj >= 1, "n_traj must be >= 1");
    assert!(bin_width > 0.0, "bin width must be > 0");
    let finals: Vec<Result<(f64, f64, f64)>> = par_map(n_traj, |i| {
        let mut rng = trajectory_rng(seed, i as u64);
        let rec = propagate_sampled(protocol, init, &mut rng)?;
        let s = rec.final_state();
        Ok((s.phi, s.chi, rec.log_weight))
    });
    let mut phi_final = Vec::with_capacity(n_traj);
    let mut chi_final = Vec::with_capacity(n_traj);
    let mut log_weight = Vec::with_capacity(n_traj);
    for r in finals {
        let (p, c, w) = r?;
        phi_final.push(p);
        chi_final.push(c);
        log_weight.push(w);
    }
    let histogram = histogram(&phi_final, bin_width);
    Ok(EnsembleSummary {
        n_traj,
        seed,
        phi_init: init.phi,
        bin_width,
        phi_final,
        chi_final,
        log_weight,
        histogram,
    })
}

fn histogram(values: &[f64], bin_width: f64) -> Vec<(f64, usize)> {
    use std::collections::BTreeMap;
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in values {
        let idx = (v / bin_width).floor() as i64;
        *bins.entry(idx).or_insert(0) += 1;
    }
    bins.into_iter()
        .map(|(idx, count)| ((idx as f64 + 0.5) * bin_width, count))
        .collect()
}

/// Post-select self-closing outcomes: winding trajectories end within
/// half a bin of phi_init + 2 pi, non-winding within half a bin of
/// phi_init.
pub fn self_closing_stats(summary: &EnsembleSummary, bin_width: f64) -> Result<SelfClosingStats> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let target_w = summary.phi_init + two_pi;
    let target_n = summary.phi_init;
    let half = 0.5 * bin_width;
    let n_winding = summary
        .phi_final
        .iter()
        .filter(|&&p| (p - target_w).abs() < half)
        .count();
    let n_nonwinding = summary
        .phi_final
        .iter()
        .filter(|&&p| (p - target_n).abs() < half)
        .count();
    if n_winding == 0 {
        return Err(QtError::EmptyBin("winding"));
    }
    if n_nonwinding == 0 {
        return Err(QtError::EmptyBin("non-winding"));
    }
    let n = summary.n_traj as f64;
    Ok(SelfClosingStats {
        p_winding: n_winding as f64 / n,
        p_nonwinding: n_nonwinding as f64 / n,
        r_empirical: n_winding as f64 / n_nonwinding as f64,
        n_winding,
        n_nonwinding,
    })
}

/// Percentile bootstrap confidence interval for the winding/non-winding
/// ratio, resampling trajectories with replacement.
pub fn bootstrap_ratio_ci(
    summary: &EnsembleSummary,
    bin_width: f64,
    n_boot: usize,
    seed: u64,
    level: f64,
) -> Result<(f64, f64)> {
    let stats = self_closing_stats(summary, bin_width)?;
    let (cw, cn, n) = (stats.n_winding, stats.n_nonwinding, summary.n_traj);
    let (pw, pn) = (cw as f64 / n as f64, cn as f64 / n as f64);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut bw = 0usize;
        let mut bn = 0usize;
        for _ in 0..n {
            let u: f64 = rand::Rng::random(&mut rng);
            if u < pw {
                bw += 1;
            } else if u < pw + pn {
                bn += 1;
            }
        }
        let r = if bn == 0 {
            f64::INFINITY
        } else {
            bw as f64 / bn as f64
        };
        ratios.push(r);
    }
    ratios.sort_by(|a, b| a.total_cmp(b));
    let alpha = 0.5 * (1.0 - level);
    let lo_idx = ((n_boot as f64 * alpha) as usize).min(n_boot - 1);
    let hi_idx = ((n_boot as f64 * (1.0 - alpha)) as usize).min(n_boot - 1);
    Ok((ratios[lo_idx], ratios[hi_idx]))
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// an equatorial-axis protocol keeps equatorial states on the
        /// equator for every readout record
        #[test]
        fn equator_invariance_any_record(
            seed in 0u64..1_000_000,
            tau in 0.02f64..0.5,
            phi0 in -3.0f64..3.0,
        ) {
            let p = MeasurementProtocol::gaussian(PI / 2.0, tau, 300);
            let init = BlochState::new(PI / 2.0, phi0);
            let mut rng = trajectory_rng(seed, 0);
            let rec = propagate_sampled(&p, &init, &mut rng).unwrap();
            for s in &rec.states {
                prop_assert!((s.theta - PI / 2.0).abs() < 1e-9);
            }
        }

        /// fixed-seed runs are bit-identical
        #[test]
        fn seeded_rerun_is_identical(seed in 0u64..1_000_000, idx in 0u64..64) {
            let p = MeasurementProtocol::gaussian(1.2, 0.15, 80);
            let init = BlochState::new(0.9, -0.4);
            let mut r1 = trajectory_rng(seed, idx);
            let mut r2 = trajectory_rng(seed, idx);
            let a = propagate_sampled(&p, &init, &mut r1).unwrap();
            let b = propagate_sampled(&p, &init, &mut r2).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
