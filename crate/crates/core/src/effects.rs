//! Counterfactual ("virtual twin") treatment-effect scores per landmark row.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{PcmDataset, PcmRow};
use crate::error::{Error, Result};
use crate::survmodels::{expected_time, SurvivalFunction, SurvivalModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponderClass {
    Responder,
    NonResponder,
    AntiResponder,
}

impl ResponderClass {
    pub fn of(effect: f64, threshold: f64) -> Self {
        if effect > threshold {
            ResponderClass::Responder
        } else if effect < -threshold {
            ResponderClass::AntiResponder
        } else {
            ResponderClass::NonResponder
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResponderClass::Responder => "responder",
            ResponderClass::NonResponder => "non_responder",
            ResponderClass::AntiResponder => "anti_responder",
        }
    }
}

/// Source of the time under the arm a row was actually assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FactualTime {
    /// Observed residual time for events, factual prediction when censored.
    Observed,
    /// Factual prediction for every row, so both times come from the model and
    /// share its bias.
    #[default]
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectConfig {
    pub threshold: f64,
    pub factual: FactualTime,
}

impl Default for EffectConfig {
    fn default() -> Self {
        Self { threshold: 0.15, factual: FactualTime::Predicted }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectScore {
    pub patient_id: String,
    pub patient: usize,
    pub landmark_time: f64,
    /// `ln(tau_treated / tau_control)`.
    pub effect: f64,
    pub class: ResponderClass,
    pub tau_treated: f64,
    pub tau_control: f64,
}

/// Copy of `x` with the 0/1 treatment indicator at `treatment` flipped.
pub fn flip_treatment(x: &[f64], treatment: Option<usize>) -> Result<Vec<f64>> {
    let j = treatment
        .filter(|&j| j < x.len())
        .ok_or_else(|| Error::Configuration("model has no treatment covariate".into()))?;
    let mut z = x.to_vec();
    z[j] = match x[j] {
        v if v == 0.0 => 1.0,
        v if v == 1.0 => 0.0,
        v => return Err(Error::InvalidInput(format!("treatment indicator must be 0 or 1, got {v}"))),
    };
    Ok(z)
}

/// Prediction for the same row under the other arm.
pub fn counterfactual_predict(
    model: &dyn SurvivalModel,
    x: &[f64],
    treatment: Option<usize>,
) -> Result<SurvivalFunction> {
    model.predict_survival(&flip_treatment(x, treatment)?)
}

pub fn treatment_effect(
    model: &dyn SurvivalModel,
    row: &PcmRow,
    treatment: Option<usize>,
    config: &EffectConfig,
) -> Result<EffectScore> {
    let counter = expected_time(&counterfactual_predict(model, &row.features, treatment)?);
    let factual = match (config.factual, row.status) {
        (FactualTime::Observed, true) => row.residual_time,
        _ => expected_time(&model.predict_survival(&row.features)?),
    };
    let (tau_treated, tau_control) = if row.arm == 1 { (factual, counter) } else { (counter, factual) };
    if !(tau_treated > 0.0 && tau_control > 0.0) {
        return Err(Error::UndefinedScore(format!(
            "non-positive time for `{}` at {}: treated {tau_treated}, control {tau_control}",
            row.patient_id, row.landmark
        )));
    }
    let effect = (tau_treated / tau_control).ln();
    if !effect.is_finite() {
        return Err(Error::UndefinedScore(format!("non-finite effect for `{}`", row.patient_id)));
    }
    Ok(EffectScore {
        patient_id: row.patient_id.clone(),
        patient: row.patient,
        landmark_time: row.landmark,
        effect,
        class: ResponderClass::of(effect, config.threshold),
        tau_treated,
        tau_control,
    })
}

/// Scores every row, in row order.
pub fn score_all(model: &dyn SurvivalModel, rows: &PcmDataset, config: &EffectConfig) -> Result<Vec<EffectScore>> {
    let t = Some(rows.treatment_index());
    rows.rows.par_iter().map(|r| treatment_effect(model, r, t, config)).collect()
}

/// Indices into a score list, grouped into the three sampling regions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SamplingRegions {
    pub region1: Vec<usize>,
    pub region2: Vec<usize>,
    pub region3: Vec<usize>,
}

impl SamplingRegions {
    pub fn region_of(&self, i: usize) -> Option<u8> {
        if self.region1.contains(&i) {
            Some(1)
        } else if self.region2.contains(&i) {
            Some(2)
        } else if self.region3.contains(&i) {
            Some(3)
        } else {
            None
        }
    }
}

fn quarter(n: usize) -> usize {
    n.div_ceil(4)
}

/// Region 1: lowest quarter of anti-responders. Region 2: highest quarter of
/// anti-responders, all non-responders and lowest quarter of responders.
/// Region 3: highest quarter of responders. When a class is too small for two
/// disjoint quarters the outer region (1 or 3) is filled first.
pub fn sampling_regions(scores: &[EffectScore]) -> SamplingRegions {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].effect.total_cmp(&scores[b].effect));
    let of = |c: ResponderClass| -> Vec<usize> { idx.iter().copied().filter(|&i| scores[i].class == c).collect() };
    let anti = of(ResponderClass::AntiResponder);
    let non = of(ResponderClass::NonResponder);
    let resp = of(ResponderClass::Responder);

    let qa = quarter(anti.len());
    let region1 = anti[..qa].to_vec();
    let top_a = qa.min(anti.len() - qa);
    let qr = quarter(resp.len());
    let region3 = resp[resp.len() - qr..].to_vec();
    let low_r = qr.min(resp.len() - qr);

    let mut region2 = anti[anti.len() - top_a..].to_vec();
    region2.extend(&non);
    region2.extend(&resp[..low_r]);
    SamplingRegions { region1, region2, region3 }
}

/// Mean effect per patient (values summed in sorted order so the result does
/// not depend on row order). Returned in patient order.
pub fn patient_mean_effects(scores: &[EffectScore]) -> Vec<(usize, String, f64)> {
    let mut by: std::collections::BTreeMap<usize, (String, Vec<f64>)> = std::collections::BTreeMap::new();
    for s in scores {
        by.entry(s.patient).or_insert_with(|| (s.patient_id.clone(), Vec::new())).1.push(s.effect);
    }
    by.into_iter()
        .map(|(p, (id, mut v))| {
            v.sort_by(f64::total_cmp);
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (p, id, m)
        })
        .collect()
}

pub fn write_scores_csv(scores: &[EffectScore], regions: &SamplingRegions, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "landmark_time", "effect", "class", "region"])?;
    let mut region = vec![String::new(); scores.len()];
    for (r, list) in [(1, &regions.region1), (2, &regions.region2), (3, &regions.region3)] {
        for &i in list {
            region[i] = r.to_string();
        }
    }
    for (s, reg) in scores.iter().zip(region) {
        w.write_record([
            s.patient_id.clone(),
            s.landmark_time.to_string(),
            s.effect.to_string(),
            s.class.as_str().to_string(),
            reg,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn score(effect: f64) -> EffectScore {
        EffectScore {
            patient_id: "p".into(),
            patient: 0,
            landmark_time: 0.0,
            effect,
            class: ResponderClass::of(effect, 0.15),
            tau_treated: effect.exp(),
            tau_control: 1.0,
        }
    }

    #[test]
    fn classes_at_threshold() {
        assert_eq!(ResponderClass::of(2f64.ln(), 0.15), ResponderClass::Responder);
        assert_eq!(ResponderClass::of(0.0, 0.15), ResponderClass::NonResponder);
        assert_eq!(ResponderClass::of(0.10, 0.15), ResponderClass::NonResponder);
        assert_eq!(ResponderClass::of(-0.2, 0.15), ResponderClass::AntiResponder);
        assert_eq!(ResponderClass::of(0.15, 0.15), ResponderClass::NonResponder);
    }

    #[test]
    fn region_sizes() {
        let mut s: Vec<EffectScore> = (0..8).map(|i| score(-1.0 - i as f64 * 0.1)).collect();
        s.extend((0..4).map(|i| score(i as f64 * 0.01)));
        s.extend((0..8).map(|i| score(1.0 + i as f64 * 0.1)));
        let r = sampling_regions(&s);
        assert_eq!((r.region1.len(), r.region2.len(), r.region3.len()), (2, 8, 2));
        // region1 holds the two most negative effects
        let mut e1: Vec<f64> = r.region1.iter().map(|&i| s[i].effect).collect();
        e1.sort_by(f64::total_cmp);
        assert!((e1[0] + 1.7).abs() < 1e-12 && (e1[1] + 1.6).abs() < 1e-12);
    }

    #[test]
    fn no_anti_responders_leaves_region1_empty() {
        let s: Vec<EffectScore> = [0.0, 0.5, 0.6].into_iter().map(score).collect();
        let r = sampling_regions(&s);
        assert!(r.region1.is_empty());
        assert_eq!(r.region3, vec![2]);
        // the lowest quarter of responders joins the middle region
        assert_eq!(r.region2, vec![0, 1]);
    }

    #[test]
    fn flip_is_an_involution() {
        let x = [0.3, 1.0, 2.0];
        let once = flip_treatment(&x, Some(1)).unwrap();
        assert_eq!(once[1], 0.0);
        assert_eq!(flip_treatment(&once, Some(1)).unwrap(), x.to_vec());
        assert!(matches!(flip_treatment(&x, None), Err(Error::Configuration(_))));
        assert!(flip_treatment(&x, Some(0)).is_err());
    }
}
