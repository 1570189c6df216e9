//! Model selection by nested, patient-grouped cross-validation scored with
//! the time-dependent concordance of combined per-patient survival curves.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PcmDataset;
use crate::error::{Error, Result};
use crate::seed::{derive_seed_path, rng_from_seed};
use crate::survmodels::{FittedModel, ModelSpec, SurvivalData, SurvivalFunction, SurvivalModel};

/// Fold counts of the nested scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub outer_k: usize,
    pub inner_k: usize,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self { outer_k: 3, inner_k: 3 }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.outer_k < 2 || self.inner_k < 2 {
            return Err(Error::Configuration("fold counts must be at least 2".into()));
        }
        Ok(())
    }
}

/// Patient-level fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    /// Patient positions, ascending.
    pub patients: Vec<usize>,
    pub fold: Vec<usize>,
    pub stratum: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self) -> BTreeMap<usize, usize> {
        self.patients.iter().copied().zip(self.fold.iter().copied()).collect()
    }

    pub fn members(&self, f: usize) -> Vec<usize> {
        self.patients.iter().zip(&self.fold).filter(|(_, &g)| g == f).map(|(&p, _)| p).collect()
    }
}

/// Per-patient outcome on the trial clock, taken from the patient's first row.
fn patient_outcomes(rows: &PcmDataset) -> BTreeMap<usize, (f64, bool)> {
    let mut out = BTreeMap::new();
    for r in &rows.rows {
        out.entry(r.patient).or_insert((r.event_time(), r.status));
    }
    out
}

/// Type-1 (lower) empirical quantile of a sorted slice.
fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Stratified, grouped k-fold assignment. Strata are censoring status crossed
/// with the quartile of the observed time; within a stratum patients are
/// shuffled and dealt round-robin, continuing the count across strata.
pub fn stratified_folds(rows: &PcmDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    let outcomes = patient_outcomes(rows);
    if outcomes.len() < k {
        return Err(Error::Plan(format!("{} patients cannot fill {k} folds", outcomes.len())));
    }
    let mut times: Vec<f64> = outcomes.values().map(|o| o.0).collect();
    times.sort_by(f64::total_cmp);
    let cuts = [0.25, 0.5, 0.75].map(|q| lower_quantile(&times, q));

    let patients: Vec<usize> = outcomes.keys().copied().collect();
    let stratum: Vec<usize> = outcomes
        .values()
        .map(|&(t, d)| {
            let q = cuts.iter().filter(|&&c| t > c).count();
            2 * q + usize::from(d)
        })
        .collect();
    let mut rng = rng_from_seed(seed);
    let mut fold = vec![0; patients.len()];
    let mut next = 0;
    for s in 0..8 {
        let mut members: Vec<usize> = (0..patients.len()).filter(|&i| stratum[i] == s).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, patients, fold, stratum })
}

/// Checks that every fold holds at least one patient with an observed event.
fn check_events(assign: &FoldAssignment, outcomes: &BTreeMap<usize, (f64, bool)>, what: &str) -> Result<()> {
    for f in 0..assign.k {
        if !assign.members(f).iter().any(|p| outcomes[p].1) {
            return Err(Error::Plan(format!("{what} fold {f} contains no events")));
        }
    }
    Ok(())
}

/// A candidate learner in model selection.
pub trait Candidate: Sync {
    type Model: SurvivalModel;

    fn label(&self) -> String;

    /// Candidates of one family compete again when the final model is chosen.
    fn family(&self) -> String;

    fn fit(&self, data: &SurvivalData, passthrough: &[usize], seed: u64) -> Result<Self::Model>;
}

impl Candidate for ModelSpec {
    type Model = FittedModel;

    fn label(&self) -> String {
        ModelSpec::label(self)
    }

    fn family(&self) -> String {
        self.kind().to_string()
    }

    fn fit(&self, data: &SurvivalData, passthrough: &[usize], seed: u64) -> Result<FittedModel> {
        ModelSpec::fit(self, data, passthrough, seed)
    }
}

/// Fits on the rows of `rows`, leaving the treatment indicator unscaled.
pub fn fit_on_rows<C: Candidate>(candidate: &C, rows: &PcmDataset, seed: u64) -> Result<C::Model> {
    let data = SurvivalData::from_rows(rows)?;
    candidate.fit(&data, &[rows.treatment_index()], seed)
}

/// Chains residual-time curves predicted at landmarks `t_1 < ... < t_K` into
/// one curve on the trial clock: `S(t) = S(t_k) S_k(t - t_k)` on `[t_k, t_{k+1})`.
pub fn combined_survival(landmarks: &[f64], curves: &[SurvivalFunction]) -> Result<SurvivalFunction> {
    if landmarks.is_empty() || landmarks.len() != curves.len() {
        return Err(Error::InvalidInput("one curve per landmark is required".into()));
    }
    if landmarks.windows(2).any(|w| !(w[0] < w[1])) || !(landmarks[0] >= 0.0) {
        return Err(Error::InvalidInput("landmarks must be nonnegative and strictly ascending".into()));
    }
    let mut times = Vec::new();
    let mut probs = Vec::new();
    let mut anchor = 1.0;
    for (k, (&tk, s)) in landmarks.iter().zip(curves).enumerate() {
        let end = landmarks.get(k + 1).copied().unwrap_or(f64::INFINITY);
        let mut push = |t: f64, p: f64| {
            if times.last().is_none_or(|&last| t > last) {
                times.push(t);
                probs.push(p);
            }
        };
        push(tk, anchor * s.eval(0.0));
        for (&u, &p) in s.times().iter().zip(s.probs()) {
            let t = tk + u;
            if t >= end {
                break;
            }
            push(t, anchor * p);
        }
        if end.is_finite() {
            anchor *= s.eval(end - tk);
        }
    }
    SurvivalFunction::new(times, probs)
}

/// Doubled concordance counts: `2 * concordant + ties` over `pairs` comparable pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConcordanceCounts {
    pub doubled_concordant: u64,
    pub pairs: u64,
}

impl ConcordanceCounts {
    pub fn score(&self) -> Result<f64> {
        if self.pairs == 0 {
            return Err(Error::UndefinedScore("no comparable pairs".into()));
        }
        Ok(self.doubled_concordant as f64 / (2 * self.pairs) as f64)
    }
}

pub fn ctd_counts(curves: &[SurvivalFunction], outcomes: &[(f64, bool)]) -> Result<ConcordanceCounts> {
    if curves.len() != outcomes.len() {
        return Err(Error::DimensionMismatch { expected: outcomes.len(), got: curves.len() });
    }
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| outcomes[a].0.total_cmp(&outcomes[b].0));
    let mut counts = ConcordanceCounts::default();
    for (pos, &i) in order.iter().enumerate() {
        let (ti, di) = outcomes[i];
        if !di {
            continue;
        }
        let si = curves[i].eval(ti);
        let later = order[pos + 1..].iter().filter(|&&j| outcomes[j].0 > ti);
        for &j in later {
            let sj = curves[j].eval(ti);
            counts.pairs += 1;
            counts.doubled_concordant += if si < sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    Ok(counts)
}

/// Time-dependent concordance over pairs with `T_i < T_j` and `δ_i = 1`;
/// tied survival values count one half.
pub fn ctd(curves: &[SurvivalFunction], outcomes: &[(f64, bool)]) -> Result<f64> {
    ctd_counts(curves, outcomes)?.score()
}

/// Combined curve and outcome of every patient in `rows`, in patient order.
pub fn patient_curves(
    model: &dyn SurvivalModel,
    rows: &PcmDataset,
) -> Result<Vec<(usize, SurvivalFunction, (f64, bool))>> {
    let mut by_patient: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.rows.iter().enumerate() {
        by_patient.entry(r.patient).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_patient.into_iter().collect();
    groups
        .par_iter()
        .map(|(p, idx)| {
            let mut idx = idx.clone();
            idx.sort_by(|&a, &b| rows.rows[a].landmark.total_cmp(&rows.rows[b].landmark));
            let landmarks: Vec<f64> = idx.iter().map(|&i| rows.rows[i].landmark).collect();
            let curves =
                idx.iter().map(|&i| model.predict_survival(&rows.rows[i].features)).collect::<Result<Vec<_>>>()?;
            let first = &rows.rows[idx[0]];
            Ok((*p, combined_survival(&landmarks, &curves)?, (first.event_time(), first.status)))
        })
        .collect()
}

/// Ctd of combined per-patient curves on `rows`.
pub fn score_rows(model: &dyn SurvivalModel, rows: &PcmDataset) -> Result<f64> {
    let pc = patient_curves(model, rows)?;
    let (curves, outcomes): (Vec<_>, Vec<_>) = pc.into_iter().map(|(_, c, o)| (c, o)).unzip();
    ctd(&curves, &outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub outer_fold: usize,
    /// `None` for the outer test score.
    pub inner_fold: Option<usize>,
    pub candidate: usize,
    pub ctd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterResult {
    pub fold: usize,
    pub selected: usize,
    pub inner_mean_ctd: f64,
    pub test_ctd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub plan: CvPlan,
    pub candidates: Vec<String>,
    pub families: Vec<String>,
    pub scores: Vec<FoldScore>,
    pub outer: Vec<OuterResult>,
    pub mean_outer_ctd: f64,
    pub sd_outer_ctd: f64,
    /// Family selected most often across outer folds.
    pub winning_family: String,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn restrict(rows: &PcmDataset, patients: &[usize]) -> PcmDataset {
    let set: std::collections::BTreeSet<usize> = patients.iter().copied().collect();
    rows.subset(|r| set.contains(&r.patient))
}

/// Index of the largest mean; first on ties.
fn argmax(means: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in means.iter().enumerate() {
        if m > means[best] {
            best = i;
        }
    }
    best
}

/// k-fold CV of every candidate on `rows`; returns per-candidate fold scores.
fn cv_scores<C: Candidate>(
    candidates: &[C],
    rows: &PcmDataset,
    assign: &FoldAssignment,
    seed_path: &[u64],
) -> Result<Vec<Vec<f64>>> {
    let folds: Vec<(PcmDataset, PcmDataset)> = (0..assign.k)
        .map(|f| {
            let test = assign.members(f);
            let train: Vec<usize> = assign.patients.iter().copied().filter(|p| !test.contains(p)).collect();
            (restrict(rows, &train), restrict(rows, &test))
        })
        .collect();
    for (train, test) in &folds {
        assert_disjoint(train, test);
    }
    let tasks: Vec<(usize, usize)> = (0..candidates.len()).flat_map(|c| (0..assign.k).map(move |f| (c, f))).collect();
    let flat: Vec<f64> = tasks
        .par_iter()
        .map(|&(c, f)| {
            let mut path = seed_path.to_vec();
            path.extend([c as u64, f as u64]);
            let seed = derive_seed_path(0, &path);
            let model = fit_on_rows(&candidates[c], &folds[f].0, seed)?;
            score_rows(&model, &folds[f].1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(flat.chunks(assign.k).map(|c| c.to_vec()).collect())
}

fn assert_disjoint(train: &PcmDataset, test: &PcmDataset) {
    let a: std::collections::BTreeSet<usize> = train.rows.iter().map(|r| r.patient).collect();
    assert!(test.rows.iter().all(|r| !a.contains(&r.patient)), "patient rows leaked across a split");
}

/// Nested cross-validation: the inner loop picks a candidate by mean Ctd on
/// each outer-training set, which is then refitted and scored on the outer
/// test patients.
pub fn nested_cv<C: Candidate>(rows: &PcmDataset, candidates: &[C], plan: &CvPlan, seed: u64) -> Result<CvReport> {
    plan.validate()?;
    if candidates.is_empty() {
        return Err(Error::Configuration("no candidate models".into()));
    }
    let outcomes = patient_outcomes(rows);
    let event_patients = outcomes.values().filter(|o| o.1).count();
    if event_patients < plan.outer_k * plan.inner_k {
        return Err(Error::Plan(format!(
            "{event_patients} patients with events; at least {} required",
            plan.outer_k * plan.inner_k
        )));
    }
    // every split is planned and checked before any fitting
    let outer = stratified_folds(rows, plan.outer_k, derive_seed_path(seed, &[0]))?;
    check_events(&outer, &outcomes, "outer")?;
    let mut inner_plans = Vec::with_capacity(plan.outer_k);
    for o in 0..plan.outer_k {
        let test = outer.members(o);
        let train: Vec<usize> = outer.patients.iter().copied().filter(|p| !test.contains(p)).collect();
        let train_rows = restrict(rows, &train);
        let inner = stratified_folds(&train_rows, plan.inner_k, derive_seed_path(seed, &[1, o as u64]))?;
        check_events(&inner, &outcomes, "inner")?;
        inner_plans.push((train_rows, restrict(rows, &test), inner));
    }

    let mut scores = Vec::new();
    let mut results = Vec::with_capacity(plan.outer_k);
    for (o, (train_rows, test_rows, inner)) in inner_plans.iter().enumerate() {
        assert_disjoint(train_rows, test_rows);
        let inner_scores = cv_scores(candidates, train_rows, inner, &[seed, 2, o as u64])?;
        for (c, fs) in inner_scores.iter().enumerate() {
            for (f, &s) in fs.iter().enumerate() {
                scores.push(FoldScore { outer_fold: o, inner_fold: Some(f), candidate: c, ctd: s });
            }
        }
        let means: Vec<f64> = inner_scores.iter().map(|fs| fs.iter().sum::<f64>() / fs.len() as f64).collect();
        let selected = argmax(&means);
        let model = fit_on_rows(&candidates[selected], train_rows, derive_seed_path(seed, &[3, o as u64]))?;
        let test_ctd = score_rows(&model, test_rows)?;
        scores.push(FoldScore { outer_fold: o, inner_fold: None, candidate: selected, ctd: test_ctd });
        results.push(OuterResult { fold: o, selected, inner_mean_ctd: means[selected], test_ctd });
    }
    let outer_ctd: Vec<f64> = results.iter().map(|r| r.test_ctd).collect();
    let (mean_outer_ctd, sd_outer_ctd) = mean_sd(&outer_ctd);
    let families: Vec<String> = candidates.iter().map(|c| c.family()).collect();
    let winning_family = winning_family(&families, &results);
    Ok(CvReport {
        plan: *plan,
        candidates: candidates.iter().map(|c| c.label()).collect(),
        families,
        scores,
        outer: results,
        mean_outer_ctd,
        sd_outer_ctd,
        winning_family,
    })
}

/// Most frequently selected family; ties go to the higher mean outer Ctd,
/// then to the family listed first.
fn winning_family(families: &[String], outer: &[OuterResult]) -> String {
    let mut order: Vec<&String> = Vec::new();
    for f in families {
        if !order.contains(&f) {
            order.push(f);
        }
    }
    let stats: Vec<(usize, f64)> = order
        .iter()
        .map(|fam| {
            let hits: Vec<f64> = outer.iter().filter(|r| &families[r.selected] == *fam).map(|r| r.test_ctd).collect();
            let mean = if hits.is_empty() { f64::NEG_INFINITY } else { hits.iter().sum::<f64>() / hits.len() as f64 };
            (hits.len(), mean)
        })
        .collect();
    let mut best = 0;
    for i in 1..order.len() {
        if stats[i].0 > stats[best].0 || (stats[i].0 == stats[best].0 && stats[i].1 > stats[best].1) {
            best = i;
        }
    }
    order[best].clone()
}

/// Final model of the whole-data refit: the winning family's hyperparameters
/// are re-searched by `inner_k`-fold CV on all rows, then the best is refitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSelection {
    pub candidate: usize,
    pub label: String,
    pub mean_ctd: f64,
    pub scores: Vec<(usize, Vec<f64>)>,
}

pub fn final_model<C: Candidate>(
    rows: &PcmDataset,
    candidates: &[C],
    report: &CvReport,
    seed: u64,
) -> Result<(C::Model, FinalSelection)> {
    let pool: Vec<usize> = (0..candidates.len()).filter(|&c| candidates[c].family() == report.winning_family).collect();
    let outcomes = patient_outcomes(rows);
    let (chosen, mean_ctd, scores) = if pool.len() == 1 {
        (pool[0], f64::NAN, Vec::new())
    } else {
        let assign = stratified_folds(rows, report.plan.inner_k, derive_seed_path(seed, &[4]))?;
        check_events(&assign, &outcomes, "final")?;
        let subset: Vec<&C> = pool.iter().map(|&c| &candidates[c]).collect();
        let fold_scores = cv_scores_ref(&subset, rows, &assign, &[seed, 5])?;
        let means: Vec<f64> = fold_scores.iter().map(|fs| fs.iter().sum::<f64>() / fs.len() as f64).collect();
        let best = argmax(&means);
        (pool[best], means[best], pool.iter().copied().zip(fold_scores).collect())
    };
    let model = fit_on_rows(&candidates[chosen], rows, derive_seed_path(seed, &[6]))?;
    Ok((model, FinalSelection { candidate: chosen, label: candidates[chosen].label(), mean_ctd, scores }))
}

struct ByRef<'a, C>(&'a C);

impl<C: Candidate> Candidate for ByRef<'_, C> {
    type Model = C::Model;
    fn label(&self) -> String {
        self.0.label()
    }
    fn family(&self) -> String {
        self.0.family()
    }
    fn fit(&self, data: &SurvivalData, passthrough: &[usize], seed: u64) -> Result<C::Model> {
        self.0.fit(data, passthrough, seed)
    }
}

fn cv_scores_ref<C: Candidate>(
    candidates: &[&C],
    rows: &PcmDataset,
    assign: &FoldAssignment,
    seed_path: &[u64],
) -> Result<Vec<Vec<f64>>> {
    let wrapped: Vec<ByRef<C>> = candidates.iter().map(|c| ByRef(*c)).collect();
    cv_scores(&wrapped, rows, assign, seed_path)
}

impl CvReport {
    /// One row per (outer fold, inner fold or test, candidate).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["outer_fold", "split", "candidate", "ctd"])?;
        for s in &self.scores {
            let split = s.inner_fold.map_or("test".to_string(), |f| format!("inner_{f}"));
            w.write_record([s.outer_fold.to_string(), split, self.candidates[s.candidate].clone(), s.ctd.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}
