use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{Covariate, CovariateKind, LongitudinalTrial, PatientRecord, Visit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnParams {
    Continuous {
        name: String,
        mean: f64,
        sd: f64,
    },
    /// Reference coding: one indicator per non-reference level.
    Categorical {
        name: String,
        levels: Vec<String>,
    },
}

/// Encoding and z-score parameters frozen from a training trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub columns: Vec<ColumnParams>,
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 1.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

/// Estimates encoding and scaling parameters from `trial` (observed cells only).
pub fn fit_normalization(trial: &LongitudinalTrial) -> NormalizationParams {
    let columns = trial
        .covariates
        .iter()
        .enumerate()
        .map(|(j, cov)| match &cov.kind {
            CovariateKind::Continuous => {
                let (mean, sd) = moments(trial.observed_values(j));
                ColumnParams::Continuous { name: cov.name.clone(), mean, sd }
            }
            CovariateKind::Categorical { levels } => {
                ColumnParams::Categorical { name: cov.name.clone(), levels: levels.clone() }
            }
        })
        .collect();
    NormalizationParams { columns }
}

impl NormalizationParams {
    pub fn output_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for col in &self.columns {
            match col {
                ColumnParams::Continuous { name, .. } => names.push(name.clone()),
                ColumnParams::Categorical { name, levels } => {
                    names.extend(levels.iter().skip(1).map(|l| format!("{name}={l}")));
                }
            }
        }
        names
    }

    /// Applies the frozen parameters. Returns the encoded trial and the number
    /// of categorical cells whose level was not seen during fitting (those are
    /// encoded as the reference level, all indicators zero).
    pub fn apply(&self, trial: &LongitudinalTrial) -> Result<(LongitudinalTrial, usize)> {
        let mut sources = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let name = match col {
                ColumnParams::Continuous { name, .. } | ColumnParams::Categorical { name, .. } => name,
            };
            let j = trial
                .covariate_index(name)
                .ok_or_else(|| Error::InvalidInput(format!("covariate `{name}` missing at apply time")))?;
            sources.push(j);
        }
        let mut unseen = 0usize;
        let mut patients = Vec::with_capacity(trial.patients.len());
        for pat in &trial.patients {
            let mut visits = Vec::with_capacity(pat.visits.len());
            for v in &pat.visits {
                let mut out = Vec::new();
                for (col, &j) in self.columns.iter().zip(&sources) {
                    let cell = v.values[j];
                    match col {
                        ColumnParams::Continuous { mean, sd, .. } => out.push(cell.map(|x| (x - mean) / sd)),
                        ColumnParams::Categorical { levels, .. } => {
                            let width = levels.len().saturating_sub(1);
                            let Some(code) = cell else {
                                out.extend(std::iter::repeat_n(None, width));
                                continue;
                            };
                            let label = match &trial.covariates[j].kind {
                                CovariateKind::Categorical { levels: own } => own[code as usize].clone(),
                                CovariateKind::Continuous => code.to_string(),
                            };
                            let mut ind = vec![Some(0.0); width];
                            match levels.iter().position(|l| *l == label) {
                                Some(0) => {}
                                Some(k) => ind[k - 1] = Some(1.0),
                                None => unseen += 1,
                            }
                            out.extend(ind);
                        }
                    }
                }
                visits.push(Visit { time: v.time, values: out });
            }
            patients.push(PatientRecord { visits, ..pat.clone() });
        }
        let covariates = self.output_names().into_iter().map(Covariate::continuous).collect();
        Ok((LongitudinalTrial { covariates, patients }, unseen))
    }
}

/// One-hot encodes categorical covariates and z-scores continuous ones, using
/// parameters estimated from `trial` itself.
pub fn encode_normalize(trial: &LongitudinalTrial) -> Result<(LongitudinalTrial, NormalizationParams)> {
    let params = fit_normalization(trial);
    let (encoded, _) = params.apply(trial)?;
    Ok((encoded, params))
}

/// Removes covariates with zero sample variance. Returns the reduced trial and
/// the removed names.
pub fn drop_constant(trial: &LongitudinalTrial) -> (LongitudinalTrial, Vec<String>) {
    let drop: Vec<usize> = (0..trial.n_covariates())
        .filter(|&j| {
            let mut it = trial.observed_values(j);
            match it.next() {
                None => true,
                Some(first) => it.all(|x| x == first),
            }
        })
        .collect();
    let names = drop.iter().map(|&j| trial.covariates[j].name.clone()).collect();
    (trial.without_columns(&drop), names)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VifRemoval {
    pub name: String,
    /// `f64::INFINITY` for exact collinearity.
    pub vif: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VifLog {
    pub removals: Vec<VifRemoval>,
}

const COLLINEAR_TOL: f64 = 1e-10;

/// VIF of every column of a correlation matrix `r`.
pub(crate) fn vifs_from_correlation(r: &DMatrix<f64>) -> Vec<f64> {
    let p = r.nrows();
    (0..p)
        .map(|j| {
            if p == 1 {
                return 1.0;
            }
            let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
            let sub = r.select_rows(&others).select_columns(&others);
            let cross = r.select_rows(&others).column(j).into_owned();
            let eig = SymmetricEigen::new(sub);
            let cutoff = eig.eigenvalues.amax() * 1e-12;
            // cross' sub^+ cross
            let proj = eig.eigenvectors.transpose() * &cross;
            let explained: f64 =
                proj.iter().zip(eig.eigenvalues.iter()).filter(|(_, &l)| l > cutoff).map(|(c, l)| c * c / l).sum();
            let resid = 1.0 - explained;
            if resid <= COLLINEAR_TOL {
                f64::INFINITY
            } else {
                1.0 / resid
            }
        })
        .collect()
}

/// Stepwise removal of the covariate with the largest variance inflation
/// factor while it exceeds `threshold`. Uses complete visit rows.
pub fn vif_stepwise(trial: &LongitudinalTrial, threshold: f64) -> Result<(LongitudinalTrial, VifLog)> {
    if !(threshold > 1.0) {
        return Err(Error::Configuration(format!("VIF threshold must exceed 1, got {threshold}")));
    }
    if let Some(c) = trial.covariates.iter().find(|c| c.is_categorical()) {
        return Err(Error::InvalidInput(format!("VIF requires encoded covariates; `{}` is categorical", c.name)));
    }
    let p = trial.n_covariates();
    let rows: Vec<Vec<f64>> = trial
        .patients
        .iter()
        .flat_map(|pat| pat.visits.iter())
        .filter_map(|v| v.values.iter().copied().collect::<Option<Vec<f64>>>())
        .collect();
    let n = rows.len();
    if p < 2 || n < 2 {
        return Ok((trial.clone(), VifLog::default()));
    }

    let mut mean = vec![0.0; p];
    for r in &rows {
        for j in 0..p {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut gram = DMatrix::<f64>::zeros(p, p);
    for r in &rows {
        for a in 0..p {
            let da = r[a] - mean[a];
            for b in a..p {
                gram[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }

    let mut active: Vec<usize> = (0..p).collect();
    let mut log = VifLog::default();
    while active.len() >= 2 {
        let k = active.len();
        let mut corr = DMatrix::<f64>::zeros(k, k);
        for (a, &ja) in active.iter().enumerate() {
            for (b, &jb) in active.iter().enumerate() {
                let denom = (gram[(ja, ja)] * gram[(jb, jb)]).sqrt();
                corr[(a, b)] = if denom > 0.0 {
                    gram[(ja, jb)] / denom
                } else if a == b {
                    1.0
                } else {
                    0.0
                };
            }
        }
        let vifs = vifs_from_correlation(&corr);
        let (worst, &vif) =
            vifs.iter().enumerate().fold((0, &vifs[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
        if vif <= threshold {
            break;
        }
        let j = active.remove(worst);
        log.removals.push(VifRemoval { name: trial.covariates[j].name.clone(), vif });
    }
    let drop: Vec<usize> = (0..p).filter(|j| !active.contains(j)).collect();
    Ok((trial.without_columns(&drop), log))
}
