//! Local Cox-form surrogates of a black-box survival model.
//!
//! Around an instance `x*`, samples `z_i` are drawn with treatment and
//! landmark time held fixed, and log hazard ratios `b` are chosen to minimise
//! `sum_i w_i max_t |phi_i(t) - c - (z_i - x*)·b|` with
//! `phi_i(t) = ln H(t | z_i) - ln H0(t)`. For fixed `(c, b)` the inner maximum
//! over `t` equals `|m_i - c - (z_i - x*)·b| + r_i`, where `m_i` and `r_i` are
//! the midrange and half-range of `phi_i`, so the problem is an exact weighted
//! least-absolute-deviations fit of the midranges.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PcmDataset;
use crate::effects::SamplingRegions;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, hash_bytes, rng_from_seed, Rng};
use crate::survmodels::SurvivalModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub n_perturbations: usize,
    /// Kernel width in training-sd units; `None` gives `0.75 * sqrt(free covariates)`.
    pub kernel_width: Option<f64>,
    /// Perturbation sd as a multiple of each covariate's training sd.
    pub perturb_scale: f64,
    /// Covariates held fixed in addition to treatment and landmark time.
    pub frozen: Vec<String>,
    pub solver_tol: f64,
    pub max_iter: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            n_perturbations: 1000,
            kernel_width: None,
            perturb_scale: 0.5,
            frozen: Vec::new(),
            solver_tol: 1e-6,
            max_iter: 200,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_perturbations == 0 || self.max_iter == 0 {
            return Err(Error::Configuration("perturbation and iteration counts must be positive".into()));
        }
        if !(self.perturb_scale >= 0.0) || !(self.solver_tol > 0.0) || self.kernel_width.is_some_and(|k| !(k > 0.0)) {
            return Err(Error::Configuration("explanation scales must be positive".into()));
        }
        Ok(())
    }
}

/// Resolved sampling geometry for one feature layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSpace {
    pub names: Vec<String>,
    pub frozen: Vec<bool>,
    /// Perturbation sd per feature (0 for frozen features).
    pub perturb_sd: Vec<f64>,
    /// Training sd per feature; distances are measured in these units.
    pub scale: Vec<f64>,
    pub kernel_width: f64,
}

impl LocalSpace {
    pub fn new(names: Vec<String>, frozen: Vec<bool>, scale: Vec<f64>, config: &ExplainConfig) -> Result<Self> {
        config.validate()?;
        if frozen.len() != names.len() || scale.len() != names.len() {
            return Err(Error::DimensionMismatch { expected: names.len(), got: frozen.len().min(scale.len()) });
        }
        let mut frozen = frozen;
        for f in &config.frozen {
            let j = names
                .iter()
                .position(|n| n == f)
                .ok_or_else(|| Error::Configuration(format!("unknown frozen covariate `{f}`")))?;
            frozen[j] = true;
        }
        let free = frozen.iter().filter(|&&f| !f).count();
        if free == 0 {
            return Err(Error::Configuration("every covariate is frozen".into()));
        }
        let scale: Vec<f64> = scale.into_iter().map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 }).collect();
        let perturb_sd =
            scale.iter().zip(&frozen).map(|(s, &f)| if f { 0.0 } else { config.perturb_scale * s }).collect();
        let kernel_width = config.kernel_width.unwrap_or(0.75 * (free as f64).sqrt());
        Ok(Self { names, frozen, perturb_sd, scale, kernel_width })
    }

    /// Layout of a landmark dataset: treatment and landmark time frozen, scales
    /// from the sample sd of each feature over the rows.
    pub fn from_rows(rows: &PcmDataset, config: &ExplainConfig) -> Result<Self> {
        let p = rows.n_features();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; p];
        for r in &rows.rows {
            for (m, v) in mean.iter_mut().zip(&r.features) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; p];
        for r in &rows.rows {
            for ((s, v), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                *s += (v - m).powi(2) / (n - 1.0).max(1.0);
            }
        }
        let mut frozen = vec![false; p];
        for j in rows.frozen_features() {
            frozen[j] = true;
        }
        Self::new(rows.feature_names(), frozen, var.into_iter().map(f64::sqrt).collect(), config)
    }

    pub fn free(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&j| !self.frozen[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub z: Vec<Vec<f64>>,
    /// Kernel weights summing to one.
    pub w: Vec<f64>,
}

/// Draws `n` Gaussian perturbations of the free coordinates of `x_star`.
pub fn perturb(x_star: &[f64], space: &LocalSpace, n: usize, rng: &mut Rng) -> Samples {
    let mut z = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    for _ in 0..n {
        let mut zi = x_star.to_vec();
        let mut dist = 0.0;
        for j in 0..zi.len() {
            if space.frozen[j] {
                continue;
            }
            let e: f64 = StandardNormal.sample(rng);
            zi[j] += space.perturb_sd[j] * e;
            dist += ((zi[j] - x_star[j]) / space.scale[j]).powi(2);
        }
        z.push(zi);
        d2.push(dist / space.kernel_width.powi(2));
    }
    // shift by the smallest exponent so weights never all underflow
    let lo = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = d2.iter().map(|d| (lo - d).exp()).collect();
    let total: f64 = raw.iter().sum();
    Samples { z, w: raw.into_iter().map(|v| v / total).collect() }
}

/// `phi_i(t_k)` for every sample on the knots where the reference cumulative
/// hazard is positive and `t <= training t95`. `None` marks a sample whose
/// cumulative hazard is zero (or infinite) at every knot.
pub fn log_hazard_ratios(model: &dyn SurvivalModel, samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Option<Vec<f64>>>)> {
    let reference = model.reference_cumhaz();
    let t95 = model.training().t95;
    let (knots, h0): (Vec<f64>, Vec<f64>) = reference
        .times
        .iter()
        .zip(&reference.values)
        .filter(|(&t, &h)| h > 0.0 && t <= t95)
        .map(|(&t, &h)| (t, h))
        .unzip();
    if knots.is_empty() {
        return Err(Error::Explanation("reference cumulative hazard has no usable knots".into()));
    }
    let phi = samples
        .iter()
        .map(|z| {
            let s = model.predict_survival(z)?;
            let v: Vec<f64> = knots
                .iter()
                .zip(&h0)
                .filter_map(|(&t, &h)| {
                    let hz = -s.eval(t).ln();
                    (hz > 0.0 && hz.is_finite()).then(|| hz.ln() - h.ln())
                })
                .collect();
            Ok((!v.is_empty()).then_some(v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((knots, phi))
}

/// Result of the weighted Chebyshev surrogate fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    /// Achieved `sum_i w_i max_t |phi_i(t) - c - x_i·b|`.
    pub objective: f64,
}

fn lad_objective(y: &[f64], r: &[f64], x: &[Vec<f64>], w: &[f64], beta: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..y.len() {
        let fit = beta[0] + x[i].iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
        total += w[i] * ((y[i] - fit).abs() + r[i]);
    }
    total
}

fn weighted_lsq(y: &[f64], x: &[Vec<f64>], u: &[f64]) -> Option<Vec<f64>> {
    let p = x.first().map_or(0, |r| r.len()) + 1;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut row = vec![1.0; p];
    for i in 0..y.len() {
        row[1..].copy_from_slice(&x[i]);
        for j in 0..p {
            let uj = u[i] * row[j];
            rhs[j] += uj * y[i];
            for k in j..p {
                a[(j, k)] += uj * row[k];
            }
        }
    }
    let scale = (0..p).map(|j| a[(j, j)]).fold(0.0, f64::max).max(1e-300);
    for j in 0..p {
        for k in 0..j {
            a[(j, k)] = a[(k, j)];
        }
        a[(j, j)] += 1e-12 * scale;
    }
    a.cholesky().map(|c| c.solve(&rhs).iter().copied().collect())
}

/// Minimises `sum_i w_i max_k |phi[i][k] - c - x[i]·b|` by iteratively
/// reweighted least squares on the midranges, finished with an exact
/// interpolation step through the best-fitting samples.
pub fn solve_chebyshev(phi: &[Vec<f64>], x: &[Vec<f64>], w: &[f64], tol: f64, max_iter: usize) -> Result<ChebyshevFit> {
    if phi.is_empty() || phi.len() != x.len() || phi.len() != w.len() {
        return Err(Error::Explanation("no samples to fit".into()));
    }
    let p = x[0].len();
    let (m, r): (Vec<f64>, Vec<f64>) = phi
        .iter()
        .map(|v| {
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            ((hi + lo) / 2.0, (hi - lo) / 2.0)
        })
        .unzip();
    let y_scale = 1.0 + m.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let eps = 1e-10 * y_scale;

    let mut beta = weighted_lsq(&m, x, w).unwrap_or_else(|| vec![0.0; p + 1]);
    let mut best_obj = lad_objective(&m, &r, x, w, &beta);
    let mut best = beta.clone();
    let mut prev = best_obj;
    for _ in 0..max_iter {
        let u: Vec<f64> = (0..m.len())
            .map(|i| {
                let fit = beta[0] + x[i].iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
                w[i] / (m[i] - fit).abs().max(eps)
            })
            .collect();
        let Some(next) = weighted_lsq(&m, x, &u) else { break };
        beta = next;
        let obj = lad_objective(&m, &r, x, w, &beta);
        if obj < best_obj {
            best_obj = obj;
            best = beta.clone();
        }
        if (prev - obj).abs() < tol * prev.max(1e-12) {
            break;
        }
        prev = obj;
    }
    // an optimum sits on a vertex interpolating p + 1 samples; try the closest ones
    let mut order: Vec<usize> = (0..m.len()).collect();
    let resid = |i: usize, b: &[f64]| (m[i] - b[0] - x[i].iter().zip(&b[1..]).map(|(a, c)| a * c).sum::<f64>()).abs();
    order.sort_by(|&a, &b| resid(a, &best).total_cmp(&resid(b, &best)));
    if order.len() > p {
        let sel = &order[..p + 1];
        let ys: Vec<f64> = sel.iter().map(|&i| m[i]).collect();
        let xs: Vec<Vec<f64>> = sel.iter().map(|&i| x[i].clone()).collect();
        if let Some(v) = weighted_lsq(&ys, &xs, &vec![1.0; p + 1]) {
            let obj = lad_objective(&m, &r, x, w, &v);
            if obj < best_obj {
                best_obj = obj;
                best = v;
            }
        }
    }
    Ok(ChebyshevFit { intercept: best[0], coef: best[1..].to_vec(), objective: best_obj })
}

/// Log hazard ratios of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub patient_id: String,
    pub landmark_time: f64,
    pub covariates: Vec<String>,
    pub log_hr: Vec<f64>,
    pub intercept: f64,
    /// Surrogate objective at the returned coefficients.
    pub objective: f64,
    /// Samples dropped because their cumulative hazard vanished.
    pub dropped: usize,
}

/// Fits the surrogate for `x_star` on pre-drawn samples.
pub fn fit_surrogate_inf(
    model: &dyn SurvivalModel,
    x_star: &[f64],
    samples: &Samples,
    space: &LocalSpace,
    config: &ExplainConfig,
) -> Result<Explanation> {
    model.check_dim(x_star)?;
    let free = space.free();
    let (_, phi) = log_hazard_ratios(model, &samples.z)?;
    let mut kept_phi = Vec::new();
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for (i, ph) in phi.into_iter().enumerate() {
        if let Some(v) = ph {
            kept_phi.push(v);
            xs.push(free.iter().map(|&j| samples.z[i][j] - x_star[j]).collect::<Vec<f64>>());
            ws.push(samples.w[i]);
        }
    }
    let dropped = samples.z.len() - kept_phi.len();
    if kept_phi.is_empty() {
        return Err(Error::Explanation("cumulative hazard is zero at every knot for all samples".into()));
    }
    let fit = solve_chebyshev(&kept_phi, &xs, &ws, config.solver_tol, config.max_iter)?;
    if fit.coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::Explanation("surrogate coefficients are not finite".into()));
    }
    Ok(Explanation {
        patient_id: String::new(),
        landmark_time: 0.0,
        covariates: free.iter().map(|&j| space.names[j].clone()).collect(),
        log_hr: fit.coef,
        intercept: fit.intercept,
        objective: fit.objective,
        dropped,
    })
}

/// Seed of an instance: identical feature vectors draw identical samples.
fn instance_seed(seed: u64, x: &[f64]) -> u64 {
    let bytes: Vec<u8> = x.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
    derive_seed(seed, hash_bytes(&bytes))
}

pub fn explain_instance(
    model: &dyn SurvivalModel,
    x_star: &[f64],
    space: &LocalSpace,
    config: &ExplainConfig,
    seed: u64,
) -> Result<Explanation> {
    let mut rng = rng_from_seed(instance_seed(seed, x_star));
    let samples = perturb(x_star, space, config.n_perturbations, &mut rng);
    fit_surrogate_inf(model, x_star, &samples, space, config)
}

/// One explanation per region-3 row, in region order.
pub fn explain_responders(
    model: &dyn SurvivalModel,
    rows: &PcmDataset,
    regions: &SamplingRegions,
    space: &LocalSpace,
    config: &ExplainConfig,
    seed: u64,
) -> Result<Vec<Explanation>> {
    regions
        .region3
        .par_iter()
        .map(|&i| {
            let row = &rows.rows[i];
            let mut e = explain_instance(model, &row.features, space, config, seed)?;
            e.patient_id = row.patient_id.clone();
            e.landmark_time = row.landmark;
            Ok(e)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub covariate: String,
    pub mean_log_hr: f64,
    pub hr: f64,
    /// 1-based rank by `|mean_log_hr|`, descending.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub factors: Vec<Factor>,
    pub n_explanations: usize,
}

/// Mean log hazard ratio per covariate, ranked by magnitude.
pub fn aggregate(explanations: &[Explanation]) -> Result<FactorTable> {
    let first = explanations.first().ok_or_else(|| Error::Explanation("no explanations to aggregate".into()))?;
    if explanations.iter().any(|e| e.covariates != first.covariates) {
        return Err(Error::Explanation("explanations cover different covariates".into()));
    }
    let n = explanations.len() as f64;
    let mut factors: Vec<Factor> = first
        .covariates
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut v: Vec<f64> = explanations.iter().map(|e| e.log_hr[j]).collect();
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / n;
            Factor { covariate: name.clone(), mean_log_hr: mean, hr: mean.exp(), rank: 0 }
        })
        .collect();
    // stable: equal magnitudes keep covariate order
    factors.sort_by(|a, b| b.mean_log_hr.abs().total_cmp(&a.mean_log_hr.abs()));
    for (k, f) in factors.iter_mut().enumerate() {
        f.rank = k + 1;
    }
    Ok(FactorTable { factors, n_explanations: explanations.len() })
}

impl FactorTable {
    pub fn get(&self, covariate: &str) -> Option<&Factor> {
        self.factors.iter().find(|f| f.covariate == covariate)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["covariate", "mean_log_hr", "hr", "rank"])?;
        for f in &self.factors {
            w.write_record([f.covariate.clone(), f.mean_log_hr.to_string(), f.hr.to_string(), f.rank.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_explanations_csv(explanations: &[Explanation], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "landmark_time", "covariate", "log_hr"])?;
    for e in explanations {
        for (c, b) in e.covariates.iter().zip(&e.log_hr) {
            w.write_record([e.patient_id.clone(), e.landmark_time.to_string(), c.clone(), b.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
