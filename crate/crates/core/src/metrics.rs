//! Identification metrics against ground truth (ROC, AUC, confusion ratios,
//! bootstrap bands) and characterisation of ranked explanation factors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::FactorTable;
use crate::seed::stream_rng;

/// Pairs scores with truth by key. Both sides must hold exactly the same keys.
pub fn align_by_key(scores: &[(String, f64)], truth: &[(String, bool)]) -> Result<(Vec<f64>, Vec<bool>)> {
    let map: BTreeMap<&str, bool> = truth.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    if map.len() != truth.len() {
        return Err(Error::KeyMismatch("duplicate truth keys".into()));
    }
    if scores.len() != truth.len() {
        return Err(Error::KeyMismatch(format!("{} scores for {} truth labels", scores.len(), truth.len())));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut labels = Vec::with_capacity(scores.len());
    for (k, _) in scores {
        if !seen.insert(k.as_str()) {
            return Err(Error::KeyMismatch(format!("duplicate score key `{k}`")));
        }
        labels.push(*map.get(k.as_str()).ok_or_else(|| Error::KeyMismatch(format!("no truth for `{k}`")))?);
    }
    Ok((scores.iter().map(|s| s.1).collect(), labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Predicted positive is `score > c`. Ratios with a zero denominator are `None`.
pub fn confusion_at_threshold(scores: &[f64], truth: &[bool], c: f64) -> Result<Confusion> {
    if scores.len() != truth.len() {
        return Err(Error::KeyMismatch(format!("{} scores for {} truth labels", scores.len(), truth.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &t) in scores.iter().zip(truth) {
        match (s > c, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Confusion {
        tp,
        fp,
        tn,
        fn_,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

fn class_counts(truth: &[bool]) -> Result<(usize, usize)> {
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedScore("AUC needs both classes in the truth labels".into()));
    }
    Ok((pos, neg))
}

/// ROC by sweeping thresholds from high to low; AUC as the Mann–Whitney
/// statistic with ties counted one half (computed in exact integer counts).
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<Roc> {
    if scores.len() != truth.len() {
        return Err(Error::KeyMismatch(format!("{} scores for {} truth labels", scores.len(), truth.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores must not be NaN".into()));
    }
    let (pos, neg) = class_counts(truth)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut doubled_u: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < idx.len() && scores[idx[i]] == s {
            if truth[idx[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // negatives in this group rank below every earlier positive and tie with this group's
        doubled_u += u128::from(gn) * (2 * u128::from(tp) + u128::from(gp));
        tp += gp;
        fp += gn;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = doubled_u as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(Roc { points, auc })
}

pub const ROC_GRID: usize = 101;

/// Highest TPR reached at false-positive rate `f` (the ROC as a step function).
pub fn tpr_at(points: &[(f64, f64)], f: f64) -> f64 {
    points.iter().filter(|p| p.0 <= f + 1e-12).map(|p| p.1).fold(0.0, f64::max)
}

pub fn roc_on_grid(points: &[(f64, f64)]) -> Vec<f64> {
    (0..ROC_GRID).map(|k| tpr_at(points, k as f64 / (ROC_GRID - 1) as f64)).collect()
}

/// Maximal vertical deviation of each bootstrap ROC from the point estimate.
/// Resampling is by group (patient) when `groups` is given, else by row.
/// Replicates with a single class are redrawn.
pub fn bootstrap_deviations(
    scores: &[f64],
    truth: &[bool],
    groups: Option<&[usize]>,
    n_boot: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_boot < 20 {
        return Err(Error::Configuration("at least 20 bootstrap replicates are required".into()));
    }
    let estimate = roc_on_grid(&roc_auc(scores, truth)?.points);
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..scores.len() {
        members.entry(groups.map_or(i, |g| g[i])).or_default().push(i);
    }
    let units: Vec<Vec<usize>> = members.into_values().collect();
    (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            for _ in 0..1000 {
                let mut s = Vec::with_capacity(scores.len());
                let mut t = Vec::with_capacity(scores.len());
                for _ in 0..units.len() {
                    for &i in &units[rng.gen_range(0..units.len())] {
                        s.push(scores[i]);
                        t.push(truth[i]);
                    }
                }
                if let Ok(roc) = roc_auc(&s, &t) {
                    let grid = roc_on_grid(&roc.points);
                    return Ok(grid.iter().zip(&estimate).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max));
                }
            }
            Err(Error::UndefinedScore("bootstrap replicates keep missing a class".into()))
        })
        .collect()
}

/// Smallest `w` with at least `level` of the deviations at or below it.
pub fn band_from_deviations(deviations: &[f64], level: f64) -> f64 {
    let mut d = deviations.to_vec();
    d.sort_by(f64::total_cmp);
    let k = ((level * d.len() as f64).ceil() as usize).clamp(1, d.len());
    d[k - 1]
}

/// Half-width of the fixed-width ROC confidence band.
pub fn fixed_width_bands(
    scores: &[f64],
    truth: &[bool],
    groups: Option<&[usize]>,
    level: f64,
    n_boot: usize,
    seed: u64,
) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Configuration("band level must lie in (0, 1)".into()));
    }
    Ok(band_from_deviations(&bootstrap_deviations(scores, truth, groups, n_boot, seed)?, level))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub n: usize,
    pub n_positive: usize,
    pub threshold: f64,
    /// `None` when the truth has a single class.
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub band_halfwidth: Option<f64>,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandConfig {
    pub level: f64,
    pub n_boot: usize,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self { level: 0.95, n_boot: 200 }
    }
}

pub fn identification(
    scores: &[f64],
    truth: &[bool],
    groups: Option<&[usize]>,
    threshold: f64,
    band: Option<&BandConfig>,
    seed: u64,
) -> Result<IdentificationReport> {
    let conf = confusion_at_threshold(scores, truth, threshold)?;
    let n_positive = truth.iter().filter(|&&t| t).count();
    let two_classes = n_positive > 0 && n_positive < truth.len();
    let (auc, roc, band_halfwidth) = if two_classes {
        let roc = roc_auc(scores, truth)?;
        let w = match band {
            Some(b) => Some(fixed_width_bands(scores, truth, groups, b.level, b.n_boot, seed)?),
            None => None,
        };
        (Some(roc.auc), roc.points, w)
    } else {
        (None, Vec::new(), None)
    };
    Ok(IdentificationReport {
        n: scores.len(),
        n_positive,
        threshold,
        auc,
        sensitivity: conf.sensitivity,
        specificity: conf.specificity,
        ppv: conf.ppv,
        npv: conf.npv,
        band_halfwidth,
        roc,
    })
}

impl IdentificationReport {
    /// `fpr,tpr,lower,upper` on the common FPR grid.
    pub fn write_roc_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["fpr", "tpr", "lower", "upper"])?;
        let hw = self.band_halfwidth.unwrap_or(0.0);
        if !self.roc.is_empty() {
            for (k, tpr) in roc_on_grid(&self.roc).into_iter().enumerate() {
                let f = k as f64 / (ROC_GRID - 1) as f64;
                w.write_record([f, tpr, (tpr - hw).max(0.0), (tpr + hw).min(1.0)].map(|v| v.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharacterisationReport {
    pub top2_count: usize,
    pub mean_abs_log_hr_top2: f64,
}

/// How many `designated` covariates rank in the top two, and the mean
/// magnitude of the top two log hazard ratios.
pub fn characterisation(table: &FactorTable, designated: &[&str]) -> Result<CharacterisationReport> {
    if table.factors.len() < 2 {
        return Err(Error::InvalidInput("factor table needs at least two rows".into()));
    }
    let top = &table.factors[..2];
    Ok(CharacterisationReport {
        top2_count: top.iter().filter(|f| designated.contains(&f.covariate.as_str())).count(),
        mean_abs_log_hr_top2: top.iter().map(|f| f.mean_log_hr.abs()).sum::<f64>() / 2.0,
    })
}

/// ROC curves (with optional shaded band) as a standalone SVG.
pub fn roc_svg(curves: &[(&str, &[(f64, f64)], Option<f64>)]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let px = |f: f64| PAD + f * SIZE;
    let py = |t: f64| PAD + (1.0 - t) * SIZE;
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut s = String::new();
    let total = SIZE + 2.0 * PAD;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    );
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r##"<line class="diagonal" x1="{}" y1="{}" x2="{}" y2="{}" stroke="#888" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ =
            writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{v}</text>"#, px(v), py(0.0) + 16.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v}</text>"#,
            px(0.0) - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">False positive rate</text>"#,
        px(0.5),
        total - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">True positive rate</text>"#,
        py(0.5),
        py(0.5)
    );
    for (c, (label, points, band)) in curves.iter().enumerate() {
        let colour = colours[c % colours.len()];
        let grid = roc_on_grid(points);
        if let Some(w) = band {
            let mut poly = String::new();
            for (k, t) in grid.iter().enumerate() {
                let f = k as f64 / (ROC_GRID - 1) as f64;
                let _ = write!(poly, "{:.2},{:.2} ", px(f), py((t + w).min(1.0)));
            }
            for (k, t) in grid.iter().enumerate().rev() {
                let f = k as f64 / (ROC_GRID - 1) as f64;
                let _ = write!(poly, "{:.2},{:.2} ", px(f), py((t - w).max(0.0)));
            }
            let _ = writeln!(
                s,
                r#"<polygon class="band" points="{}" fill="{colour}" fill-opacity="0.2" stroke="none"/>"#,
                poly.trim_end()
            );
        }
        let mut path = String::new();
        for (k, t) in grid.iter().enumerate() {
            let f = k as f64 / (ROC_GRID - 1) as f64;
            let _ = write!(path, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, px(f), py(*t));
        }
        let _ = writeln!(
            s,
            r#"<path class="roc" d="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            path.trim_end()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{label}</text>"#,
            px(0.55),
            py(0.1) + 16.0 * c as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::Factor;

    #[test]
    fn perfect_scores() {
        let scores = [0.9, 0.8, -0.5, 0.0];
        let truth = [true, true, false, false];
        let c = confusion_at_threshold(&scores, &truth, 0.15).unwrap();
        assert_eq!([c.sensitivity, c.specificity, c.ppv, c.npv], [Some(1.0); 4]);
        assert_eq!(roc_auc(&scores, &truth).unwrap().auc, 1.0);
    }

    #[test]
    fn null_truth_only_specificity() {
        let c = confusion_at_threshold(&[0.0, 0.3, -1.0], &[false; 3], 0.15).unwrap();
        assert_eq!(c.sensitivity, None);
        assert_eq!(c.npv, Some(1.0));
        assert!((c.specificity.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(roc_auc(&[0.0, 1.0], &[false, false]).is_err());
    }

    #[test]
    fn one_of_each_cell() {
        let c = confusion_at_threshold(&[1.0, 1.0, 0.0, 0.0], &[true, false, true, false], 0.15).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert_eq!([c.sensitivity, c.specificity, c.ppv, c.npv], [Some(0.5); 4]);
    }

    #[test]
    fn roc_is_monotone_from_origin_to_corner() {
        let roc = roc_auc(&[0.1, 0.4, 0.35, 0.8, 0.4], &[false, true, false, true, false]).unwrap();
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
        assert!(roc.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn identical_resamples_give_zero_band() {
        let d = vec![0.0; 50];
        assert_eq!(band_from_deviations(&d, 0.95), 0.0);
        assert!(bootstrap_deviations(&[0.1, 0.2], &[true, false], None, 10, 1).is_err());
    }

    #[test]
    fn key_alignment() {
        let s = vec![("a".to_string(), 1.0), ("b".to_string(), 0.0)];
        let t = vec![("b".to_string(), false), ("a".to_string(), true)];
        assert_eq!(align_by_key(&s, &t).unwrap(), (vec![1.0, 0.0], vec![true, false]));
        let bad = vec![("a".to_string(), true), ("c".to_string(), false)];
        assert!(matches!(align_by_key(&s, &bad), Err(Error::KeyMismatch(_))));
    }

    fn table(rows: &[(&str, f64)]) -> FactorTable {
        FactorTable {
            factors: rows
                .iter()
                .enumerate()
                .map(|(k, (n, v))| Factor { covariate: n.to_string(), mean_log_hr: *v, hr: v.exp(), rank: k + 1 })
                .collect(),
            n_explanations: 1,
        }
    }

    #[test]
    fn top_two_counts() {
        let t = table(&[("X2", 0.5), ("X1", -0.4), ("X7", 0.1)]);
        assert_eq!(characterisation(&t, &["X1", "X2"]).unwrap().top2_count, 2);
        let t = table(&[("X5", 0.5), ("X7", -0.4), ("X1", 0.1)]);
        assert_eq!(characterisation(&t, &["X1", "X2"]).unwrap().top2_count, 0);
        let t = table(&[("a", 0.4), ("b", -0.2), ("c", 0.1)]);
        assert!((characterisation(&t, &["a"]).unwrap().mean_abs_log_hr_top2 - 0.3).abs() < 1e-15);
        assert!(characterisation(&table(&[("a", 1.0)]), &["a"]).is_err());
    }

    #[test]
    fn svg_has_axes_and_diagonal() {
        let svg = roc_svg(&[("pcm", &[(0.0, 0.0), (0.2, 0.7), (1.0, 1.0)], Some(0.1))]);
        assert!(svg.contains("class=\"diagonal\""));
        assert!(svg.contains("class=\"band\""));
        assert!(svg.starts_with("<svg"));
    }
}
