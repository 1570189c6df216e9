//! Synthetic two-arm trials with time-invariant and ARMA(1,2) time-varying
//! covariates, proportional-hazards event times with baseline cumulative
//! hazard `t^2`, and a responder region `X1 > 0, X2 < 0`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Covariate, LongitudinalTrial, PatientRecord, Visit};
use crate::error::{Error, Result};
use crate::seed::{derive_seed_path, rng_from_seed};

/// Number of covariates with a defined role in the hazard and region.
pub const BASE_COVARIATES: usize = 15;
/// Covariates `X1..X6` are time-invariant; `X7..X15` follow the ARMA process.
const INVARIANT_BASE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Fixed,
    Dynamic,
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmaParams {
    pub phi1: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl Default for ArmaParams {
    fn default() -> Self {
        Self { phi1: 1.0, theta1: 1.0, theta2: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_patients: usize,
    pub n_covariates: usize,
    /// Enhanced treatment effect inside region A (log-hazard scale).
    pub theta: f64,
    pub scenario: Scenario,
    pub time_grid: Vec<f64>,
    pub arma: ArmaParams,
    /// Administrative censoring time.
    pub horizon: f64,
    pub seed: u64,
}

pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 10.0).collect()
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            n_covariates: BASE_COVARIATES,
            theta: 0.9,
            scenario: Scenario::Fixed,
            time_grid: default_grid(),
            arma: ArmaParams::default(),
            horizon: 10.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.n_covariates < BASE_COVARIATES {
            return bad(format!("n_covariates must be at least {BASE_COVARIATES}"));
        }
        if self.time_grid.first() != Some(&0.0) {
            return bad("time grid must start at 0".into());
        }
        if self.time_grid.windows(2).any(|w| !(w[0] < w[1])) || self.time_grid.iter().any(|t| !t.is_finite()) {
            return bad("time grid must be strictly ascending".into());
        }
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return bad("theta must be nonnegative".into());
        }
        if (self.theta == 0.0) != (self.scenario == Scenario::Null) {
            return bad("theta must be 0 exactly in the null scenario".into());
        }
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive".into());
        }
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.n_covariates).map(|j| format!("X{j}")).collect()
    }
}

/// Whether covariate `j` (zero-based) is time-invariant.
pub fn is_time_invariant(j: usize) -> bool {
    if j < BASE_COVARIATES {
        j < INVARIANT_BASE
    } else {
        // extension covariates alternate, starting with an invariant one
        (j - BASE_COVARIATES).is_multiple_of(2)
    }
}

/// ARMA(1,2) path: `x_t = c_t + e_t + phi1 x_{t-1} + theta1 e_{t-1} + theta2 e_{t-2}`,
/// with pre-sample innovations zero and `x_{-1} = initial`.
pub fn arma_path(params: &ArmaParams, constants: &[f64], innovations: &[f64], initial: f64) -> Vec<f64> {
    debug_assert_eq!(constants.len(), innovations.len());
    let mut out = Vec::with_capacity(constants.len());
    let (mut prev, mut e1, mut e2) = (initial, 0.0, 0.0);
    for (&c, &e) in constants.iter().zip(innovations) {
        let x = c + e + params.phi1 * prev + params.theta1 * e1 + params.theta2 * e2;
        out.push(x);
        prev = x;
        e2 = e1;
        e1 = e;
    }
    out
}

/// Covariate values of one patient on the grid, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientCovariates {
    pub values: Vec<f64>,
    /// Time at which X1 and X2 are redrawn (dynamic scenario).
    pub switch_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePanel {
    pub grid: Vec<f64>,
    pub n_covariates: usize,
    pub patients: Vec<PatientCovariates>,
}

impl CovariatePanel {
    pub fn row(&self, patient: usize, k: usize) -> &[f64] {
        let p = self.n_covariates;
        &self.patients[patient].values[k * p..(k + 1) * p]
    }

    pub fn value(&self, patient: usize, k: usize, j: usize) -> f64 {
        self.row(patient, k)[j]
    }
}

const STREAM_COVARIATES: u64 = 0;
const STREAM_SURVIVAL: u64 = 1;
const STREAM_ARMS: u64 = 2;

fn patient_covariates(config: &SimConfig, patient: usize) -> PatientCovariates {
    let mut rng = rng_from_seed(derive_seed_path(config.seed, &[STREAM_COVARIATES, patient as u64]));
    let n_t = config.time_grid.len();
    let p = config.n_covariates;
    let mut values = vec![0.0; n_t * p];
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    for j in 0..p {
        if is_time_invariant(j) {
            let x = normal();
            for k in 0..n_t {
                values[k * p + j] = x;
            }
        } else {
            let consts: Vec<f64> = (0..n_t).map(|_| normal()).collect();
            let innov: Vec<f64> = (0..n_t).map(|_| normal()).collect();
            for (k, x) in arma_path(&config.arma, &consts, &innov, 0.0).into_iter().enumerate() {
                values[k * p + j] = x;
            }
        }
    }
    let switch_time = if config.scenario == Scenario::Dynamic {
        let m = config.horizon * rng.gen::<f64>();
        let (x1, x2): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        for (k, &t) in config.time_grid.iter().enumerate() {
            if t >= m {
                values[k * p] = x1;
                values[k * p + 1] = x2;
            }
        }
        Some(m)
    } else {
        None
    };
    PatientCovariates { values, switch_time }
}

/// Draws the covariate panel. Patients use independent generator streams.
pub fn gen_covariates(config: &SimConfig) -> CovariatePanel {
    let patients = (0..config.n_patients).into_par_iter().map(|i| patient_covariates(config, i)).collect();
    CovariatePanel { grid: config.time_grid.clone(), n_covariates: config.n_covariates, patients }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub grid: Vec<f64>,
    /// `in_a[patient][k]` is region-A membership at grid time `k`.
    pub in_a: Vec<Vec<bool>>,
    pub switch_times: Vec<Option<f64>>,
}

impl GroundTruth {
    /// Membership at an arbitrary time (the grid value at or before `t`).
    pub fn at(&self, patient: usize, t: f64) -> bool {
        let k = self.grid.partition_point(|&g| g <= t).max(1) - 1;
        self.in_a[patient][k]
    }
}

pub fn in_region_a(x: &[f64]) -> bool {
    x[0] > 0.0 && x[1] < 0.0
}

/// Region-A labels. Under the null scenario no region exists and every label
/// is false.
pub fn assign_region(panel: &CovariatePanel, scenario: Scenario) -> GroundTruth {
    let exists = scenario != Scenario::Null;
    let in_a = (0..panel.patients.len())
        .map(|i| (0..panel.grid.len()).map(|k| exists && in_region_a(panel.row(i, k))).collect())
        .collect();
    GroundTruth { grid: panel.grid.clone(), in_a, switch_times: panel.patients.iter().map(|p| p.switch_time).collect() }
}

/// Linear predictor of the simulation hazard at one grid time.
pub fn hazard_lp(x: &[f64], treated: bool, theta: f64, in_a: bool) -> f64 {
    let d = if treated { 1.0 } else { 0.0 };
    let a = if in_a { 1.0 } else { 0.0 };
    1.0 - 0.5 * x[0] - 0.5 * x[1] + 0.5 * x[6] - 0.1 * d - 0.5 * x[1] * x[6] - theta * d * a
}

/// Inverts the piecewise cumulative hazard `H(t) = sum_k exp(lp_k) (t_{k+1}^2 - t_k^2)`
/// at `target` (an Exp(1) draw). The last interval extends to infinity.
/// Returns `(time, observed)`; times beyond `horizon` are censored there.
pub fn survival_time_from_draw(grid: &[f64], lp: &[f64], target: f64, horizon: f64) -> Result<(f64, bool)> {
    if grid.len() != lp.len() || grid.is_empty() {
        return Err(Error::InvalidInput("linear predictor must have one value per grid interval".into()));
    }
    if let Some(bad) = lp.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite linear predictor {bad}")));
    }
    let mut cum = 0.0;
    for k in 0..grid.len() {
        let rate = lp[k].exp();
        let t0 = grid[k];
        let seg = match grid.get(k + 1) {
            Some(&t1) => rate * (t1 * t1 - t0 * t0),
            None => f64::INFINITY,
        };
        if cum + seg >= target {
            let t = (t0 * t0 + (target - cum) / rate).sqrt();
            return Ok(if t > horizon { (horizon, false) } else { (t, true) });
        }
        cum += seg;
    }
    unreachable!("last interval is unbounded")
}

/// Draws `E ~ Exp(1)` and inverts the cumulative hazard.
pub fn gen_survival_time<R: Rng + ?Sized>(grid: &[f64], lp: &[f64], horizon: f64, rng: &mut R) -> Result<(f64, bool)> {
    let e: f64 = Exp1.sample(rng);
    survival_time_from_draw(grid, lp, e, horizon)
}

/// Permuted blocks of two: each consecutive pair gets one arm of each.
pub fn allocate_arms(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = rng_from_seed(derive_seed_path(seed, &[STREAM_ARMS]));
    let mut arms = Vec::with_capacity(n);
    while arms.len() < n {
        let first: u8 = rng.gen_range(0..2);
        arms.push(first);
        if arms.len() < n {
            arms.push(1 - first);
        }
    }
    arms
}

#[derive(Debug, Clone)]
pub struct SimulatedTrial {
    pub trial: LongitudinalTrial,
    pub truth: GroundTruth,
    pub panel: CovariatePanel,
}

pub fn patient_id(i: usize) -> String {
    format!("P{:05}", i + 1)
}

pub fn simulate(config: &SimConfig) -> Result<SimulatedTrial> {
    config.validate()?;
    let panel = gen_covariates(config);
    let truth = assign_region(&panel, config.scenario);
    let arms = allocate_arms(config.n_patients, config.seed);
    let grid = &config.time_grid;
    let p = config.n_covariates;

    let outcomes: Vec<(f64, bool)> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| {
            let treated = arms[i] == 1;
            let lp: Vec<f64> =
                (0..grid.len()).map(|k| hazard_lp(panel.row(i, k), treated, config.theta, truth.in_a[i][k])).collect();
            let mut rng = rng_from_seed(derive_seed_path(config.seed, &[STREAM_SURVIVAL, i as u64]));
            gen_survival_time(grid, &lp, config.horizon, &mut rng)
        })
        .collect::<Result<_>>()?;

    let patients = outcomes
        .iter()
        .enumerate()
        .map(|(i, &(event_time, observed))| PatientRecord {
            id: patient_id(i),
            arm: arms[i],
            event_time,
            event_observed: observed,
            visits: grid
                .iter()
                .enumerate()
                .take_while(|(_, &t)| t < event_time)
                .map(|(k, &t)| Visit { time: t, values: panel.row(i, k).iter().map(|&x| Some(x)).collect() })
                .collect(),
        })
        .collect();
    let trial = LongitudinalTrial {
        covariates: config.covariate_names().into_iter().map(Covariate::continuous).collect(),
        patients,
    };
    debug_assert!(p == trial.n_covariates());
    Ok(SimulatedTrial { trial, truth, panel })
}

/// Writes `patient_id,time,in_A` for every patient and grid time.
pub fn write_truth_csv(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "patient_id,time,in_A")?;
    for (i, row) in truth.in_a.iter().enumerate() {
        for (t, &a) in truth.grid.iter().zip(row) {
            writeln!(w, "{},{},{}", patient_id(i), t, u8::from(a))?;
        }
    }
    w.flush()?;
    Ok(())
}
