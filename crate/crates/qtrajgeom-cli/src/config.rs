//! JSON experiment configs, one schema per subcommand. Unknown keys are
//! rejected so figure recipes stay in sync with the code. `--set k=v` and
//! `--seed` edit the parsed document before validation.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::f64::consts::PI;
use std::path::Path;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    OnAxis,
    Equilibrium,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Greedy,
    FixedUnit,
}

fn default_axis_theta() -> f64 {
    PI / 2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub tau: f64,
    #[serde(default = "default_axis_theta")]
    pub axis_theta: f64,
    #[serde(default = "d_steps100")]
    pub n_steps: usize,
    #[serde(default = "d_traj500")]
    pub n_traj: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_bin")]
    pub bin_width: f64,
    #[serde(default = "d_init_eq")]
    pub init: InitKind,
    /// How many full per-step records go to trajectories.csv (the ensemble
    /// files always cover all n_traj members).
    #[serde(default = "d_record10")]
    pub record_trajectories: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (self.n - 1).max(1) as f64)
            .collect()
    }
}

fn d_theta_grid() -> GridSpec {
    GridSpec { min: 0.3, max: 1.55, n: 64 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimalConfig {
    pub taus: Vec<f64>,
    #[serde(default = "d_theta_grid")]
    pub theta_grid: GridSpec,
    #[serde(default = "d_steps1200")]
    pub n_steps: usize,
    /// Solve the extremal branches (branches.csv, chi_of_Theta.csv); off,
    /// only the closed-form equilibrium table is emitted.
    #[serde(default = "d_true")]
    pub include_branches: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionConfig {
    #[serde(default = "d_scan_taus")]
    pub tau_grid: Vec<f64>,
    #[serde(default = "d_theta_grid128")]
    pub theta_grid: GridSpec,
    #[serde(default = "d_steps1200")]
    pub n_steps: usize,
    #[serde(default = "d_open_taus")]
    pub open_taus: Vec<f64>,
    #[serde(default = "d_eq_taus")]
    pub equilibrium_taus: Vec<f64>,
    #[serde(default = "d_ntheta64")]
    pub open_n_theta: usize,
    #[serde(default = "d_steps300")]
    pub open_steps: usize,
    #[serde(default = "d_sub2")]
    pub open_substeps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChernConfig {
    pub taus: Vec<f64>,
    #[serde(default = "d_ntheta81")]
    pub n_theta: usize,
    #[serde(default = "d_steps400")]
    pub steps: usize,
    #[serde(default = "d_sub2")]
    pub substeps: usize,
    #[serde(default = "d_init_axis")]
    pub init: InitKind,
    #[serde(default = "d_rec_greedy")]
    pub record: RecordKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionsConfig {
    pub taus: Vec<f64>,
    #[serde(default = "d_steps1200")]
    pub n_steps: usize,
    /// Also run the trajectory ensemble and report the empirical ratio with
    /// its bootstrap confidence interval.
    #[serde(default = "d_true")]
    pub monte_carlo: bool,
    #[serde(default = "d_steps100")]
    pub mc_steps: usize,
    #[serde(default = "d_traj500")]
    pub mc_traj: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_bin")]
    pub bin_width: f64,
    #[serde(default = "d_boot500")]
    pub bootstrap: usize,
    #[serde(default = "d_boot_seed")]
    pub bootstrap_seed: u64,
    #[serde(default = "d_ci")]
    pub confidence: f64,
}

fn d_steps100() -> usize { 100 }
fn d_traj500() -> usize { 500 }
fn d_seed() -> u64 { 2024 }
fn d_bin() -> f64 { 0.1 }
fn d_init_eq() -> InitKind { InitKind::Equilibrium }
fn d_init_axis() -> InitKind { InitKind::OnAxis }
fn d_rec_greedy() -> RecordKind { RecordKind::Greedy }
fn d_record10() -> usize { 10 }
fn d_steps1200() -> usize { 1200 }
fn d_steps300() -> usize { 300 }
fn d_steps400() -> usize { 400 }
fn d_sub2() -> usize { 2 }
fn d_ntheta64() -> usize { 64 }
fn d_ntheta81() -> usize { 81 }
fn d_true() -> bool { true }
fn d_boot500() -> usize { 500 }
fn d_boot_seed() -> u64 { 7 }
fn d_ci() -> f64 { 0.95 }
fn d_scan_taus() -> Vec<f64> {
    vec![0.10, 0.12, 0.14, 0.16, 0.18, 0.20]
}
fn d_theta_grid128() -> GridSpec {
    GridSpec { min: 0.3, max: 1.55, n: 128 }
}
fn d_open_taus() -> Vec<f64> {
    vec![0.06, 0.08, 0.10, 0.12, 0.14]
}
fn d_eq_taus() -> Vec<f64> {
    vec![0.16, 0.19, 0.22, 0.25, 0.28]
}

/// Read the config file, apply `--set` overrides (values parsed as JSON,
/// falling back to a plain string), and return the merged document.
pub fn load_document(path: &Path, sets: &[String]) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let map = doc
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("{}: top level must be an object", path.display())))?;
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set '{s}' is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
    }
    Ok(doc)
}

pub fn parse<T: serde::de::DeserializeOwned>(doc: Value) -> Result<T, CliError> {
    serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))
}

fn angle_in(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), CliError> {
    if v.is_finite() && v > lo && v < hi {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} = {v} outside ({lo}, {hi})")))
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} = {v} must be positive")))
    }
}

fn taus_ok(name: &str, taus: &[f64]) -> Result<(), CliError> {
    if taus.is_empty() {
        return Err(CliError::Config(format!("{name} must be non-empty")));
    }
    for &t in taus {
        positive(name, t)?;
    }
    Ok(())
}

fn grid_ok(name: &str, g: &GridSpec) -> Result<(), CliError> {
    angle_in(&format!("{name}.min"), g.min, 0.0, PI)?;
    angle_in(&format!("{name}.max"), g.max, 0.0, PI)?;
    if g.max <= g.min || g.n < 2 {
        return Err(CliError::Config(format!("{name}: need min < max and n >= 2")));
    }
    Ok(())
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        positive("tau", self.tau)?;
        angle_in("axis_theta", self.axis_theta, 0.0, PI)?;
        positive("bin_width", self.bin_width)?;
        if self.n_steps == 0 || self.n_traj == 0 {
            return Err(CliError::Config("n_steps and n_traj must be >= 1".into()));
        }
        Ok(())
    }
}

impl OptimalConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        taus_ok("taus", &self.taus)?;
        grid_ok("theta_grid", &self.theta_grid)
    }
}

impl TransitionConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        taus_ok("tau_grid", &self.tau_grid)?;
        taus_ok("open_taus", &self.open_taus)?;
        taus_ok("equilibrium_taus", &self.equilibrium_taus)?;
        grid_ok("theta_grid", &self.theta_grid)
    }
}

impl ChernConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        taus_ok("taus", &self.taus)?;
        if self.n_theta < 3 {
            return Err(CliError::Config("n_theta must be >= 3".into()));
        }
        Ok(())
    }
}

impl CorrectionsConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        taus_ok("taus", &self.taus)?;
        positive("bin_width", self.bin_width)?;
        angle_in("confidence", self.confidence, 0.0, 1.0)
    }
}

/// FNV-1a over the canonical serialization of the merged document; embedded
/// in every output file so data can be traced back to its exact recipe.
pub fn config_hash(doc: &Value) -> String {
    let bytes = serde_json::to_string(doc).expect("serializable");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
