//! Longitudinal trial data and the pre-processing chain that turns it into
//! landmark (partly conditional) rows.
//!
//! The chain, in order: early-event filter, last-observation-carried-forward,
//! hot-deck multiple imputation of baseline gaps, categorical encoding,
//! removal of zero-variance columns, stepwise VIF pruning, landmark
//! expansion, and the leakage-gap filter.

mod csvio;
mod encode;
mod impute;
mod pcm;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csvio::{ingest_csv, read_csv, write_csv, write_csv_to, CsvSchema};
pub use encode::{
    drop_constant, encode_normalize, fit_normalization, vif_stepwise, ColumnParams, NormalizationParams, VifLog,
    VifRemoval,
};
pub use impute::{carry_forward_impute, has_missing, multiple_impute_baseline};
pub use pcm::{
    filter_events, filter_leakage, pcm_transform, write_pcm_csv, PcmDataset, PcmMode, PcmRow, LANDMARK_FEATURE,
    TREATMENT_FEATURE,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    /// Values are stored as indices into `levels`; the first level is the
    /// reference category.
    Categorical {
        levels: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
}

impl Covariate {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: CovariateKind::Continuous }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, CovariateKind::Categorical { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub time: f64,
    /// One entry per covariate; `None` marks a missing cell.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Treatment indicator, 0 = control, 1 = treated.
    pub arm: u8,
    pub event_time: f64,
    pub event_observed: bool,
    pub visits: Vec<Visit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalTrial {
    pub covariates: Vec<Covariate>,
    pub patients: Vec<PatientRecord>,
}

impl LongitudinalTrial {
    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    /// Observed values of column `j` across all visits of all patients.
    pub fn observed_values(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.patients.iter().flat_map(|p| p.visits.iter()).filter_map(move |v| v.values[j])
    }

    /// Drops the listed columns (indices into the current covariate list).
    pub fn without_columns(&self, drop: &[usize]) -> LongitudinalTrial {
        let drop: HashSet<usize> = drop.iter().copied().collect();
        let keep: Vec<usize> = (0..self.n_covariates()).filter(|j| !drop.contains(j)).collect();
        LongitudinalTrial {
            covariates: keep.iter().map(|&j| self.covariates[j].clone()).collect(),
            patients: self
                .patients
                .iter()
                .map(|p| PatientRecord {
                    visits: p
                        .visits
                        .iter()
                        .map(|v| Visit { time: v.time, values: keep.iter().map(|&j| v.values[j]).collect() })
                        .collect(),
                    ..p.clone()
                })
                .collect(),
        }
    }

    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.patients.iter().filter(|p| p.arm == 1).count();
        (self.patients.len() - treated, treated)
    }

    /// Checks the structural invariants of the trial.
    pub fn validate(&self) -> Result<()> {
        let p = self.n_covariates();
        let mut ids = HashSet::new();
        for pat in &self.patients {
            if !ids.insert(pat.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate patient id `{}`", pat.id)));
            }
            if pat.arm > 1 {
                return Err(Error::InvalidInput(format!("patient `{}` has arm {}", pat.id, pat.arm)));
            }
            if !(pat.event_time.is_finite() && pat.event_time > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "patient `{}` has non-positive event time {}",
                    pat.id, pat.event_time
                )));
            }
            match pat.visits.first() {
                Some(v) if v.time == 0.0 => {}
                _ => {
                    return Err(Error::InvalidInput(format!("patient `{}` has no visit at time 0", pat.id)));
                }
            }
            for w in pat.visits.windows(2) {
                if !(w[0].time < w[1].time) {
                    return Err(Error::InvalidInput(format!(
                        "patient `{}` has non-ascending visit times {} and {}",
                        pat.id, w[0].time, w[1].time
                    )));
                }
            }
            for v in &pat.visits {
                if v.values.len() != p {
                    return Err(Error::DimensionMismatch { expected: p, got: v.values.len() });
                }
                if !(v.time < pat.event_time) {
                    return Err(Error::InvalidInput(format!(
                        "patient `{}` has a visit at {} not before its event time {}",
                        pat.id, v.time, pat.event_time
                    )));
                }
                if v.values.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidInput(format!("patient `{}` has a non-finite value", pat.id)));
                }
            }
        }
        Ok(())
    }
}
