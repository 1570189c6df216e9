use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LongitudinalTrial, NormalizationParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PcmMode {
    /// One row per visit (partly conditional / landmark expansion).
    #[default]
    Full,
    /// Only the time-0 row per patient; the baseline-only comparator.
    BaselineOnly,
}

/// One landmark row: the covariates current at `landmark` and the residual
/// time to event from there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcmRow {
    pub patient_id: String,
    /// Position of the patient in the source trial.
    pub patient: usize,
    pub arm: u8,
    pub landmark: f64,
    /// Covariates, then the treatment indicator, then (full mode) the landmark time.
    pub features: Vec<f64>,
    pub residual_time: f64,
    pub status: bool,
}

impl PcmRow {
    /// Event or censoring time on the trial clock.
    pub fn event_time(&self) -> f64 {
        self.landmark + self.residual_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcmDataset {
    pub covariate_names: Vec<String>,
    pub mode: PcmMode,
    pub rows: Vec<PcmRow>,
    pub normalization: Option<NormalizationParams>,
}

pub const TREATMENT_FEATURE: &str = "treatment";
pub const LANDMARK_FEATURE: &str = "landmark_time";

impl PcmDataset {
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_covariates() + 1 + usize::from(self.mode == PcmMode::Full)
    }

    pub fn treatment_index(&self) -> usize {
        self.n_covariates()
    }

    pub fn landmark_index(&self) -> Option<usize> {
        (self.mode == PcmMode::Full).then(|| self.n_covariates() + 1)
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = self.covariate_names.clone();
        names.push(TREATMENT_FEATURE.to_string());
        if self.mode == PcmMode::Full {
            names.push(LANDMARK_FEATURE.to_string());
        }
        names
    }

    /// Indices of the features never perturbed or explained.
    pub fn frozen_features(&self) -> Vec<usize> {
        let mut v = vec![self.treatment_index()];
        v.extend(self.landmark_index());
        v
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.rows.iter().filter(|r| r.status).count()
    }

    /// Distinct patient positions in row order of first appearance.
    pub fn patients(&self) -> Vec<usize> {
        let mut seen = std::collections::BTreeSet::new();
        self.rows.iter().filter(|r| seen.insert(r.patient)).map(|r| r.patient).collect()
    }

    pub fn subset(&self, keep: impl Fn(&PcmRow) -> bool) -> PcmDataset {
        PcmDataset {
            covariate_names: self.covariate_names.clone(),
            mode: self.mode,
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let width = self.n_features();
        for r in &self.rows {
            if !(r.residual_time > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "row for `{}` at {} has non-positive residual time",
                    r.patient_id, r.landmark
                )));
            }
            if r.features.len() != width {
                return Err(Error::DimensionMismatch { expected: width, got: r.features.len() });
            }
        }
        Ok(())
    }
}

/// Removes patients whose observed event falls before `cutoff`.
pub fn filter_events(trial: &LongitudinalTrial, cutoff: f64) -> LongitudinalTrial {
    LongitudinalTrial {
        covariates: trial.covariates.clone(),
        patients: trial.patients.iter().filter(|p| !(p.event_observed && p.event_time < cutoff)).cloned().collect(),
    }
}

/// Removes landmark rows whose residual time is below `gap`.
pub fn filter_leakage(rows: &PcmDataset, gap: f64) -> PcmDataset {
    rows.subset(|r| !(r.residual_time < gap))
}

/// Expands the trial into landmark rows.
pub fn pcm_transform(trial: &LongitudinalTrial, mode: PcmMode) -> Result<PcmDataset> {
    if let Some(c) = trial.covariates.iter().find(|c| c.is_categorical()) {
        return Err(Error::InvalidInput(format!("covariate `{}` must be encoded before landmarking", c.name)));
    }
    let mut rows = Vec::new();
    for (k, pat) in trial.patients.iter().enumerate() {
        let visits = match mode {
            PcmMode::Full => &pat.visits[..],
            PcmMode::BaselineOnly => &pat.visits[..pat.visits.len().min(1)],
        };
        for v in visits {
            let residual = pat.event_time - v.time;
            if !(residual > 0.0) {
                continue;
            }
            let mut features = Vec::with_capacity(v.values.len() + 2);
            for (j, cell) in v.values.iter().enumerate() {
                features.push(cell.ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "patient `{}` still has a missing `{}` at time {}",
                        pat.id, trial.covariates[j].name, v.time
                    ))
                })?);
            }
            features.push(f64::from(pat.arm));
            if mode == PcmMode::Full {
                features.push(v.time);
            }
            rows.push(PcmRow {
                patient_id: pat.id.clone(),
                patient: k,
                arm: pat.arm,
                landmark: v.time,
                features,
                residual_time: residual,
                status: pat.event_observed,
            });
        }
    }
    Ok(PcmDataset { covariate_names: trial.covariate_names(), mode, rows, normalization: None })
}

pub fn write_pcm_csv(data: &PcmDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["patient_id".to_string(), "landmark_time".into(), "residual_time".into(), "status".into()];
    header.extend(data.feature_names());
    w.write_record(&header)?;
    for r in &data.rows {
        let mut rec = vec![
            r.patient_id.clone(),
            r.landmark.to_string(),
            r.residual_time.to_string(),
            u8::from(r.status).to_string(),
        ];
        rec.extend(r.features.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::tests::patient;
    use super::super::Covariate;
    use super::*;

    fn trial(visits: Vec<f64>, y: f64, obs: bool) -> LongitudinalTrial {
        LongitudinalTrial {
            covariates: vec![Covariate::continuous("x")],
            patients: vec![patient("a", 1, y, obs, visits.into_iter().map(|t| (t, vec![Some(t)])).collect())],
        }
    }

    #[test]
    fn two_visits_give_two_rows() {
        let d = pcm_transform(&trial(vec![0.0, 0.5], 2.0, true), PcmMode::Full).unwrap();
        let got: Vec<(f64, f64, bool)> = d.rows.iter().map(|r| (r.landmark, r.residual_time, r.status)).collect();
        assert_eq!(got, vec![(0.0, 2.0, true), (0.5, 1.5, true)]);
        assert_eq!(d.rows[1].features, vec![0.5, 1.0, 0.5]);
    }

    #[test]
    fn censoring_carried() {
        let d = pcm_transform(&trial(vec![0.0], 2.0, false), PcmMode::Full).unwrap();
        assert_eq!(d.rows.len(), 1);
        assert_eq!((d.rows[0].residual_time, d.rows[0].status), (2.0, false));
    }

    #[test]
    fn baseline_only_keeps_first_row() {
        let d = pcm_transform(&trial(vec![0.0, 0.5, 1.0], 2.0, true), PcmMode::BaselineOnly).unwrap();
        assert_eq!(d.rows.len(), 1);
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.landmark_index(), None);
    }

    #[test]
    fn leakage_gap() {
        let d = pcm_transform(&trial(vec![0.0, 1.9], 2.0, true), PcmMode::Full).unwrap();
        let kept = filter_leakage(&d, 0.2);
        assert_eq!(kept.rows.len(), 1);
        assert_eq!(kept.rows[0].landmark, 0.0);
    }

    #[test]
    fn early_event_cutoff() {
        let mut t = trial(vec![0.0], 10.0, true);
        t.patients.push(patient("late", 0, 30.0, true, vec![(0.0, vec![Some(1.0)])]));
        t.patients.push(patient("cens", 0, 5.0, false, vec![(0.0, vec![Some(1.0)])]));
        assert_eq!(
            filter_events(&t, 14.0).patients.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(),
            ["late", "cens"]
        );
        assert_eq!(filter_events(&t, 0.0).patients.len(), 3);
    }

    #[test]
    fn missing_cells_rejected() {
        let mut t = trial(vec![0.0], 2.0, true);
        t.patients[0].visits[0].values[0] = None;
        assert!(pcm_transform(&t, PcmMode::Full).is_err());
    }
}
