//! End-to-end runs: simulate or ingest, preprocess, landmark, select and fit
//! a model, score treatment effects, explain responders, evaluate against
//! ground truth, and aggregate repeats. Every file written is listed with its
//! digest in a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    drop_constant, encode_normalize, filter_events, filter_leakage, has_missing, ingest_csv, multiple_impute_baseline,
    pcm_transform, vif_stepwise, write_csv, write_pcm_csv, CsvSchema, LongitudinalTrial, PcmDataset, PcmMode, VifLog,
};
use crate::effects::{
    patient_mean_effects, sampling_regions, score_all, write_scores_csv, EffectConfig, EffectScore, ResponderClass,
    SamplingRegions,
};
use crate::error::{Error, Result};
use crate::evaluation::{final_model, nested_cv, CvPlan, CvReport, FinalSelection};
use crate::explain::{
    aggregate, explain_responders, write_explanations_csv, ExplainConfig, Explanation, FactorTable, LocalSpace,
};
use crate::metrics::{
    characterisation, identification, roc_svg, BandConfig, CharacterisationReport, IdentificationReport,
};
use crate::seed::{derive_seed, derive_seed_path, rng_from_seed};
use crate::survmodels::{default_grid, FittedModel, ModelArtifact, ModelKind, ModelSpec};
use crate::trialsim::{simulate, write_truth_csv, GroundTruth, Scenario, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    SimulateStudy,
    AnalyzeCsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputConfig {
    pub trial_csv: PathBuf,
    #[serde(default)]
    pub categorical: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Patients with an observed event before this time are removed.
    pub event_cutoff: f64,
    /// Landmark rows with a residual time below this gap are removed.
    pub leakage_gap: f64,
    /// Stepwise VIF pruning threshold; `None` disables pruning.
    pub vif_threshold: Option<f64>,
    /// Completed copies drawn when baseline values are missing. Complete data
    /// is analysed once.
    pub n_imputations: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { event_cutoff: 0.0, leakage_gap: 0.0, vif_threshold: Some(5.0), n_imputations: 5 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if !(self.event_cutoff >= 0.0) || !(self.leakage_gap >= 0.0) {
            return bad("event cutoff and leakage gap must be nonnegative".into());
        }
        if let Some(th) = self.vif_threshold {
            if !(th > 1.0) {
                return bad(format!("VIF threshold must exceed 1, got {th}"));
            }
        }
        if self.n_imputations == 0 {
            return bad("n_imputations must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelsConfig {
    /// Model families searched with their default grids.
    pub kinds: Vec<ModelKind>,
    pub n_trees: usize,
    /// Explicit candidates; replaces the default grids when present.
    pub specs: Option<Vec<ModelSpec>>,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self { kinds: vec![ModelKind::CoxRidge, ModelKind::SurvivalForest], n_trees: 100, specs: None }
    }
}

impl ModelsConfig {
    pub fn candidates(&self) -> Vec<ModelSpec> {
        self.specs.clone().unwrap_or_else(|| default_grid(&self.kinds, self.n_trees))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: RunMode,
    pub sim: Option<SimConfig>,
    pub input: Option<InputConfig>,
    pub preprocess: PreprocessConfig,
    pub cv: CvPlan,
    pub models: ModelsConfig,
    /// Landmark rows at every visit (`true`) or baseline rows only.
    pub pcm: bool,
    /// Runs both landmark and baseline-only analyses on each repeat.
    pub compare_pcm: bool,
    pub repeats: usize,
    pub effects: EffectConfig,
    pub explain: ExplainConfig,
    pub explain_responders: bool,
    pub bands: BandConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::SimulateStudy,
            sim: Some(SimConfig::default()),
            input: None,
            preprocess: PreprocessConfig::default(),
            cv: CvPlan::default(),
            models: ModelsConfig::default(),
            pcm: true,
            compare_pcm: false,
            repeats: 10,
            effects: EffectConfig::default(),
            explain: ExplainConfig::default(),
            explain_responders: true,
            bands: BandConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.to_string()));
        match self.mode {
            RunMode::SimulateStudy => {
                let Some(sim) = &self.sim else { return bad("simulate_study mode needs `sim`") };
                if self.input.is_some() {
                    return bad("simulate_study mode takes no `input`");
                }
                sim.validate()?;
            }
            RunMode::AnalyzeCsv => {
                if self.input.is_none() {
                    return bad("analyze_csv mode needs `input`");
                }
                if self.sim.is_some() {
                    return bad("analyze_csv mode takes no `sim`");
                }
            }
        }
        if self.repeats == 0 {
            return bad("repeats must be positive");
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        if !(self.effects.threshold >= 0.0) {
            return bad("effect threshold must be nonnegative");
        }
        self.preprocess.validate()?;
        self.cv.validate()?;
        self.explain.validate()?;
        let candidates = self.models.candidates();
        if candidates.is_empty() {
            return bad("no candidate models");
        }
        for c in &candidates {
            c.validate()?;
        }
        Ok(())
    }

    pub fn variants(&self) -> Vec<PcmMode> {
        if self.compare_pcm {
            vec![PcmMode::Full, PcmMode::BaselineOnly]
        } else if self.pcm {
            vec![PcmMode::Full]
        } else {
            vec![PcmMode::BaselineOnly]
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec_pretty(self).expect("config serialises"))
    }
}

pub fn variant_name(mode: PcmMode) -> &'static str {
    match mode {
        PcmMode::Full => "pcm",
        PcmMode::BaselineOnly => "no_pcm",
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessLog {
    pub removed_early_events: usize,
    pub imputed: bool,
    pub constant_removed: Vec<String>,
    pub vif: VifLog,
}

/// Early-event filter, baseline imputation with carry-forward, constant
/// column removal, encoding and scaling, then VIF pruning. Returns one
/// prepared trial per imputed copy, or a single one when nothing is missing.
pub fn preprocess(
    trial: &LongitudinalTrial,
    config: &PreprocessConfig,
    seed: u64,
) -> Result<Vec<(LongitudinalTrial, crate::dataset::NormalizationParams, PreprocessLog)>> {
    let before = trial.patients.len();
    let t = if config.event_cutoff > 0.0 { filter_events(trial, config.event_cutoff) } else { trial.clone() };
    let removed_early_events = before - t.patients.len();
    let imputed = has_missing(&t);
    let copies =
        if imputed { multiple_impute_baseline(&t, config.n_imputations, &mut rng_from_seed(seed))? } else { vec![t] };
    copies
        .into_iter()
        .map(|t| {
            let (t, constant_removed) = drop_constant(&t);
            let (t, params) = encode_normalize(&t)?;
            let (t, vif) = match config.vif_threshold {
                Some(th) => vif_stepwise(&t, th)?,
                None => (t, VifLog::default()),
            };
            Ok((t, params, PreprocessLog { removed_early_events, imputed, constant_removed, vif }))
        })
        .collect()
}

/// Everything one analysis of one trial produces.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub mode: PcmMode,
    pub preprocess: PreprocessLog,
    pub rows: PcmDataset,
    pub cv: CvReport,
    pub selection: FinalSelection,
    pub model: FittedModel,
    pub scores: Vec<EffectScore>,
    pub regions: SamplingRegions,
    pub explanations: Vec<Explanation>,
    pub factors: Option<FactorTable>,
    pub warnings: Vec<String>,
}

struct CopyFit {
    rows: PcmDataset,
    log: PreprocessLog,
    cv: CvReport,
    selection: FinalSelection,
    model: FittedModel,
    scores: Vec<EffectScore>,
    seed: u64,
}

fn fit_copy(
    clean: LongitudinalTrial,
    params: crate::dataset::NormalizationParams,
    log: PreprocessLog,
    mode: PcmMode,
    config: &RunConfig,
    seed: u64,
) -> Result<CopyFit> {
    let mut rows = pcm_transform(&clean, mode).map_err(|e| e.in_stage("landmark"))?;
    rows.normalization = Some(params);
    if config.preprocess.leakage_gap > 0.0 {
        rows = filter_leakage(&rows, config.preprocess.leakage_gap);
    }
    rows.check().map_err(|e| e.in_stage("landmark"))?;

    let candidates = config.models.candidates();
    let cv =
        nested_cv(&rows, &candidates, &config.cv, derive_seed(seed, 1)).map_err(|e| e.in_stage("model_selection"))?;
    let (model, selection) =
        final_model(&rows, &candidates, &cv, derive_seed(seed, 2)).map_err(|e| e.in_stage("final_model"))?;
    let scores = score_all(&model, &rows, &config.effects).map_err(|e| e.in_stage("effects"))?;
    Ok(CopyFit { rows, log, cv, selection, model, scores, seed })
}

/// Row-wise mean of the effect scores of several imputed copies.
fn average_scores(fits: &[CopyFit], threshold: f64) -> Result<Vec<EffectScore>> {
    let first = &fits[0].scores;
    let m = fits.len() as f64;
    let mut out = first.clone();
    for fit in &fits[1..] {
        if fit.scores.len() != first.len() {
            return Err(Error::KeyMismatch("imputed copies produced different landmark rows".into()));
        }
        for (o, s) in out.iter_mut().zip(&fit.scores) {
            if s.patient != o.patient || s.landmark_time != o.landmark_time {
                return Err(Error::KeyMismatch(format!("landmark row of `{}` differs between copies", s.patient_id)));
            }
            o.effect += s.effect;
            o.tau_treated += s.tau_treated;
            o.tau_control += s.tau_control;
        }
    }
    for o in &mut out {
        o.effect /= m;
        o.tau_treated /= m;
        o.tau_control /= m;
        o.class = ResponderClass::of(o.effect, threshold);
    }
    Ok(out)
}

/// Per-instance mean of the log hazard ratios over copies. A covariate that
/// was pruned in some copies is averaged over the copies that kept it.
fn average_explanations(per_copy: Vec<Vec<Explanation>>) -> Result<Vec<Explanation>> {
    let mut iter = per_copy.into_iter();
    let mut acc: Vec<(Explanation, Vec<usize>)> = match iter.next() {
        Some(first) => first
            .into_iter()
            .map(|e| {
                let n = vec![1; e.log_hr.len()];
                (e, n)
            })
            .collect(),
        None => return Ok(Vec::new()),
    };
    let mut copies = 1.0;
    for list in iter {
        copies += 1.0;
        if list.len() != acc.len() {
            return Err(Error::Explanation("imputed copies explained different instances".into()));
        }
        for ((a, counts), e) in acc.iter_mut().zip(list) {
            if a.patient_id != e.patient_id || a.landmark_time != e.landmark_time {
                return Err(Error::Explanation("imputed copies explained different instances".into()));
            }
            for (name, b) in e.covariates.iter().zip(&e.log_hr) {
                match a.covariates.iter().position(|c| c == name) {
                    Some(j) => {
                        a.log_hr[j] += b;
                        counts[j] += 1;
                    }
                    None => {
                        a.covariates.push(name.clone());
                        a.log_hr.push(*b);
                        counts.push(1);
                    }
                }
            }
            a.intercept += e.intercept;
            a.objective += e.objective;
            a.dropped += e.dropped;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(mut a, counts)| {
            for (b, n) in a.log_hr.iter_mut().zip(counts) {
                *b /= n as f64;
            }
            a.intercept /= copies;
            a.objective /= copies;
            a
        })
        .collect())
}

/// Runs the whole chain on one trial. With missing baseline values every
/// imputed copy is analysed separately; effect scores and log hazard ratios
/// are averaged across copies, and the first copy supplies the reported
/// model, rows and cross-validation.
pub fn analyze(trial: &LongitudinalTrial, mode: PcmMode, config: &RunConfig, seed: u64) -> Result<Analysis> {
    let copies = preprocess(trial, &config.preprocess, derive_seed(seed, 0)).map_err(|e| e.in_stage("preprocess"))?;
    let fits: Vec<CopyFit> = copies
        .into_iter()
        .enumerate()
        .map(|(k, (clean, params, log))| {
            let s = if k == 0 { seed } else { derive_seed_path(seed, &[4, k as u64]) };
            fit_copy(clean, params, log, mode, config, s)
        })
        .collect::<Result<_>>()?;

    let scores = if fits.len() > 1 {
        average_scores(&fits, config.effects.threshold).map_err(|e| e.in_stage("effects"))?
    } else {
        fits[0].scores.clone()
    };
    let regions = sampling_regions(&scores);
    let mut warnings = Vec::new();
    if fits.len() > 1 {
        warnings.push(format!("baseline gaps filled by {} hot-deck copies; results are averaged", fits.len()));
    }
    if regions.region3.is_empty() {
        warnings.push("no responders: region 3 is empty and nothing is explained".to_string());
    }
    let (explanations, factors) = if config.explain_responders && !regions.region3.is_empty() {
        let per_copy = fits
            .iter()
            .map(|f| {
                let space = LocalSpace::from_rows(&f.rows, &config.explain)?;
                explain_responders(&f.model, &f.rows, &regions, &space, &config.explain, derive_seed(f.seed, 3))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("explain"))?;
        let ex = average_explanations(per_copy).map_err(|e| e.in_stage("explain"))?;
        let table = aggregate(&ex).map_err(|e| e.in_stage("explain"))?;
        (ex, Some(table))
    } else {
        (Vec::new(), None)
    };
    let CopyFit { rows, log, cv, selection, model, .. } = fits.into_iter().next().expect("at least one copy");
    Ok(Analysis { mode, preprocess: log, rows, cv, selection, model, scores, regions, explanations, factors, warnings })
}

/// Per-repeat, per-variant metrics against the simulation truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatMetrics {
    pub repeat: usize,
    pub variant: String,
    pub identification: IdentificationReport,
    pub characterisation: Option<CharacterisationReport>,
    pub x1_top2: Option<bool>,
    pub x2_top2: Option<bool>,
    pub selected_model: String,
    pub mean_outer_ctd: f64,
    pub n_rows: usize,
    pub n_responder_rows: usize,
}

pub const DESIGNATED: [&str; 2] = ["X1", "X2"];

/// Scores and truth at the evaluation grain: per-patient mean effects against
/// baseline truth for time-invariant scenarios, per-row effects against truth
/// at the landmark in the dynamic scenario. Returns `(scores, truth, groups)`.
pub fn evaluation_grain(
    scores: &[EffectScore],
    truth: &GroundTruth,
    scenario: Scenario,
) -> Result<(Vec<f64>, Vec<bool>, Vec<usize>)> {
    let index = |id: &str| -> Result<usize> {
        id.strip_prefix('P')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&k| k >= 1 && k <= truth.in_a.len())
            .map(|k| k - 1)
            .ok_or_else(|| Error::KeyMismatch(format!("no truth for patient `{id}`")))
    };
    match scenario {
        Scenario::Dynamic => {
            let mut s = Vec::with_capacity(scores.len());
            let mut t = Vec::with_capacity(scores.len());
            let mut g = Vec::with_capacity(scores.len());
            for sc in scores {
                let i = index(&sc.patient_id)?;
                s.push(sc.effect);
                t.push(truth.at(i, sc.landmark_time));
                g.push(i);
            }
            Ok((s, t, g))
        }
        Scenario::Fixed | Scenario::Null => {
            let mut s = Vec::new();
            let mut t = Vec::new();
            let mut g = Vec::new();
            for (_, id, mean) in patient_mean_effects(scores) {
                let i = index(&id)?;
                s.push(mean);
                t.push(truth.at(i, 0.0));
                g.push(i);
            }
            Ok((s, t, g))
        }
    }
}

pub fn evaluate_repeat(
    analysis: &Analysis,
    truth: &GroundTruth,
    scenario: Scenario,
    config: &RunConfig,
    repeat: usize,
    seed: u64,
) -> Result<RepeatMetrics> {
    let (s, t, g) = evaluation_grain(&analysis.scores, truth, scenario)?;
    let identification = identification(&s, &t, Some(&g), config.effects.threshold, Some(&config.bands), seed)?;
    let characterisation = match &analysis.factors {
        Some(table) if table.factors.len() >= 2 => Some(characterisation(table, &DESIGNATED)?),
        _ => None,
    };
    let in_top2 = |name: &str| analysis.factors.as_ref().map(|t| t.factors.iter().take(2).any(|f| f.covariate == name));
    Ok(RepeatMetrics {
        repeat,
        variant: variant_name(analysis.mode).to_string(),
        identification,
        characterisation,
        x1_top2: in_top2("X1"),
        x2_top2: in_top2("X2"),
        selected_model: analysis.selection.label.clone(),
        mean_outer_ctd: analysis.cv.mean_outer_ctd,
        n_rows: analysis.rows.len(),
        n_responder_rows: analysis.scores.iter().filter(|s| s.effect > config.effects.threshold).count(),
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes the artifacts of one analysis into `dir`.
pub fn write_analysis(analysis: &Analysis, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_pcm_csv(&analysis.rows, dir.join("pcm.csv"))?;
    analysis.cv.write_csv(dir.join("cv_report.csv"))?;
    analysis.cv.write_json(dir.join("cv_report.json"))?;
    ModelArtifact::new(analysis.model.clone(), analysis.rows.feature_names()).save(dir.join("model.json"))?;
    write_scores_csv(&analysis.scores, &analysis.regions, dir.join("scores.csv"))?;
    write_explanations_csv(&analysis.explanations, dir.join("explanations.csv"))?;
    if let Some(t) = &analysis.factors {
        t.write_csv(dir.join("factors.csv"))?;
    }
    Ok(())
}

fn write_metrics(m: &RepeatMetrics, dir: &Path) -> Result<()> {
    write_json(&m.identification, &dir.join("identification.json"))?;
    m.identification.write_roc_csv(dir.join("roc.csv"))?;
    if !m.identification.roc.is_empty() {
        let svg = roc_svg(&[(m.variant.as_str(), &m.identification.roc, m.identification.band_halfwidth)]);
        std::fs::write(dir.join("roc.svg"), svg)?;
    }
    if let Some(c) = &m.characterisation {
        write_json(c, &dir.join("characterisation.json"))?;
    }
    Ok(())
}

pub fn repeat_seed(master: u64, repeat: usize) -> u64 {
    derive_seed(master, repeat as u64)
}

/// One simulated repeat: simulate, analyse each variant, evaluate. When `dir`
/// is given all artifacts are written beneath it.
pub fn run_simulated_repeat(config: &RunConfig, repeat: usize, dir: Option<&Path>) -> Result<Vec<RepeatMetrics>> {
    let sim = config.sim.as_ref().ok_or_else(|| Error::Configuration("no simulation settings".into()))?;
    let seed = repeat_seed(config.seed, repeat);
    let sim_cfg = SimConfig { seed: derive_seed(seed, 0), ..sim.clone() };
    let study = simulate(&sim_cfg).map_err(|e| e.in_stage("simulate"))?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        write_csv(&study.trial, d.join("trial.csv"))?;
        write_truth_csv(&study.truth, d.join("truth.csv"))?;
    }
    let mut out = Vec::new();
    for mode in config.variants() {
        // both variants share the analysis seed so they are paired
        let analysis = analyze(&study.trial, mode, config, derive_seed(seed, 1))?;
        let metrics = evaluate_repeat(&analysis, &study.truth, sim.scenario, config, repeat, derive_seed(seed, 2))
            .map_err(|e| e.in_stage("evaluate"))?;
        if let Some(d) = dir {
            let vd = d.join(variant_name(mode));
            write_analysis(&analysis, &vd)?;
            write_metrics(&metrics, &vd)?;
            if !analysis.warnings.is_empty() {
                std::fs::write(vd.join("warnings.txt"), analysis.warnings.join("\n") + "\n")?;
            }
        }
        out.push(metrics);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| format!("{x:.6}"))
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub const AGGREGATE_HEADER: &str = "scenario,variant,n_repeats,auc,sensitivity,specificity,ppv,npv,band_halfwidth,top2_count,x1_top2,x2_top2,mean_abs_log_hr_top2,mean_outer_ctd";

/// Mean of every metric over repeats, one line per variant.
pub fn aggregate_table(scenario: &str, metrics: &[RepeatMetrics]) -> String {
    let mut by: BTreeMap<&str, Vec<&RepeatMetrics>> = BTreeMap::new();
    for m in metrics {
        by.entry(m.variant.as_str()).or_default().push(m);
    }
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    for (variant, ms) in by.iter().rev() {
        let id = |f: fn(&IdentificationReport) -> Option<f64>| mean_of(ms.iter().map(|m| f(&m.identification)));
        let frac =
            |f: fn(&RepeatMetrics) -> Option<bool>| mean_of(ms.iter().map(|m| f(m).map(|b| f64::from(u8::from(b)))));
        let _ = writeln!(
            s,
            "{scenario},{variant},{},{},{},{},{},{},{},{},{},{},{},{}",
            ms.len(),
            fmt_opt(id(|r| r.auc)),
            fmt_opt(id(|r| r.sensitivity)),
            fmt_opt(id(|r| r.specificity)),
            fmt_opt(id(|r| r.ppv)),
            fmt_opt(id(|r| r.npv)),
            fmt_opt(id(|r| r.band_halfwidth)),
            fmt_opt(mean_of(ms.iter().map(|m| m.characterisation.map(|c| c.top2_count as f64)))),
            fmt_opt(frac(|m| m.x1_top2)),
            fmt_opt(frac(|m| m.x2_top2)),
            fmt_opt(mean_of(ms.iter().map(|m| m.characterisation.map(|c| c.mean_abs_log_hr_top2)))),
            fmt_opt(mean_of(ms.iter().map(|m| Some(m.mean_outer_ctd)))),
        );
    }
    s
}

/// Per-repeat AUC of both variants side by side.
pub fn comparison_table(metrics: &[RepeatMetrics]) -> String {
    let mut by: BTreeMap<usize, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for m in metrics {
        let e = by.entry(m.repeat).or_default();
        if m.variant == "pcm" {
            e.0 = m.identification.auc;
        } else {
            e.1 = m.identification.auc;
        }
    }
    let mut s = String::from("repeat,auc_pcm,auc_no_pcm\n");
    for (r, (a, b)) in by {
        let _ = writeln!(s, "{r},{},{}", fmt_opt(a), fmt_opt(b));
    }
    s
}

fn repeats_table(metrics: &[RepeatMetrics]) -> String {
    let mut s = String::from(
        "repeat,variant,auc,sensitivity,specificity,ppv,npv,band_halfwidth,top2_count,mean_abs_log_hr_top2,selected_model,mean_outer_ctd,n_rows,n_responder_rows\n",
    );
    for m in metrics {
        let r = &m.identification;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},\"{}\",{:.6},{},{}",
            m.repeat,
            m.variant,
            fmt_opt(r.auc),
            fmt_opt(r.sensitivity),
            fmt_opt(r.specificity),
            fmt_opt(r.ppv),
            fmt_opt(r.npv),
            fmt_opt(r.band_halfwidth),
            m.characterisation.map_or("NA".into(), |c| c.top2_count.to_string()),
            fmt_opt(m.characterisation.map(|c| c.mean_abs_log_hr_top2)),
            m.selected_model,
            m.mean_outer_ctd,
            m.n_rows,
            m.n_responder_rows
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub mode: RunMode,
    pub seed: u64,
    pub config_sha256: String,
    pub repeats: Vec<String>,
    pub aggregate_tables: Vec<String>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
}

fn collect_files(root: &Path) -> Result<Vec<FileEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                if rel == "manifest.json" || rel.starts_with("report/") {
                    continue;
                }
                out.push(FileEntry { path: rel, sha256: sha256_hex(&std::fs::read(&p)?) });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn write_manifest(
    config: &RunConfig,
    repeats: Vec<String>,
    tables: Vec<String>,
    error: Option<&Error>,
) -> Result<Manifest> {
    let root = &config.output_dir;
    let (failed_stage, message) = match error {
        Some(Error::Stage { stage, source }) => (Some(stage.clone()), Some(source.to_string())),
        Some(e) => (None, Some(e.to_string())),
        None => (None, None),
    };
    let manifest = Manifest {
        status: if error.is_some() { "failed".into() } else { "complete".into() },
        mode: config.mode,
        seed: config.seed,
        config_sha256: config.digest(),
        repeats,
        aggregate_tables: tables,
        failed_stage,
        error: message,
        files: collect_files(root)?,
    };
    write_json(&manifest, &root.join("manifest.json"))?;
    Ok(manifest)
}

/// Executes a configured run and writes the artifact bundle.
pub fn run(config: &RunConfig) -> Result<Manifest> {
    config.validate()?;
    let root = &config.output_dir;
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join("config.json"), serde_json::to_vec_pretty(config)?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Configuration(format!("cannot start worker pool: {e}")))?;
    let result = pool.install(|| match config.mode {
        RunMode::SimulateStudy => run_study(config),
        RunMode::AnalyzeCsv => run_csv(config),
    });
    match result {
        Ok((repeats, tables)) => write_manifest(config, repeats, tables, None),
        Err((repeats, e)) => {
            write_manifest(config, repeats, Vec::new(), Some(&e))?;
            Err(e)
        }
    }
}

type StageResult = std::result::Result<(Vec<String>, Vec<String>), (Vec<String>, Error)>;

fn run_study(config: &RunConfig) -> StageResult {
    let root = &config.output_dir;
    let names: Vec<String> = (0..config.repeats).map(|r| format!("repeat_{r:03}")).collect();
    let results: Vec<Result<Vec<RepeatMetrics>>> = (0..config.repeats)
        .into_par_iter()
        .map(|r| run_simulated_repeat(config, r, Some(&root.join(&names[r]))))
        .collect();
    let mut metrics = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(m) => metrics.extend(m),
            Err(e) => return Err((names[..r].to_vec(), e)),
        }
    }
    let scenario = config.sim.as_ref().map_or("csv", |s| match s.scenario {
        Scenario::Fixed => "fixed",
        Scenario::Dynamic => "dynamic",
        Scenario::Null => "null",
    });
    let mut tables = vec!["aggregate.csv".to_string(), "repeats.csv".to_string()];
    let write = || -> Result<()> {
        std::fs::write(root.join("aggregate.csv"), aggregate_table(scenario, &metrics))?;
        std::fs::write(root.join("repeats.csv"), repeats_table(&metrics))?;
        if config.compare_pcm {
            std::fs::write(root.join("comparison.csv"), comparison_table(&metrics))?;
        }
        Ok(())
    };
    write().map_err(|e| (names.clone(), e.in_stage("aggregate")))?;
    if config.compare_pcm {
        tables.push("comparison.csv".into());
    }
    Ok((names, tables))
}

fn run_csv(config: &RunConfig) -> StageResult {
    let input = config.input.as_ref().expect("validated");
    let fail = |e: Error| (Vec::new(), e);
    let schema = CsvSchema { categorical: input.categorical.clone() };
    let trial = ingest_csv(&input.trial_csv, &schema).map_err(|e| fail(e.in_stage("ingest")))?;
    let mut tables = Vec::new();
    for mode in config.variants() {
        let analysis = analyze(&trial, mode, config, derive_seed(config.seed, 1)).map_err(fail)?;
        let dir = config.output_dir.join(variant_name(mode));
        write_analysis(&analysis, &dir).map_err(|e| fail(e.in_stage("write")))?;
        if analysis.factors.is_some() {
            tables.push(format!("{}/factors.csv", variant_name(mode)));
        }
    }
    Ok((Vec::new(), tables))
}

/// Rendered view of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: String,
    pub warnings: Vec<String>,
    pub figures: Vec<PathBuf>,
}

fn read_roc_csv(path: &Path) -> Result<(Vec<(f64, f64)>, Option<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut pts = Vec::new();
    let mut hw = None;
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidInput(format!("{}: malformed row", path.display())))
        };
        let (f, t, up) = (num(0)?, num(1)?, num(3)?);
        if t < 1.0 && up < 1.0 {
            hw = Some(up - t);
        }
        pts.push((f, t));
    }
    Ok((pts, hw))
}

/// Renders the summary and ROC figures of a finished bundle from its stored
/// files, without recomputation. Writes into `<bundle>/report/`.
pub fn report(bundle: &Path) -> Result<Report> {
    let manifest_path = bundle.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|_| Error::MissingArtifact(manifest_path.clone()))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut warnings = Vec::new();
    let config_path = bundle.join("config.json");
    let config_bytes = std::fs::read(&config_path).map_err(|_| Error::MissingArtifact(config_path.clone()))?;
    if sha256_hex(&config_bytes) != manifest.config_sha256 {
        warnings.push("integrity: config.json does not match the manifest hash".to_string());
    }
    for f in &manifest.files {
        match std::fs::read(bundle.join(&f.path)) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 => {}
            Ok(_) => warnings.push(format!("integrity: {} does not match the manifest hash", f.path)),
            Err(_) => warnings.push(format!("integrity: {} is listed but missing", f.path)),
        }
    }
    if manifest.status != "complete" {
        warnings.push(format!(
            "run did not complete (stage {}): {}",
            manifest.failed_stage.as_deref().unwrap_or("unknown"),
            manifest.error.as_deref().unwrap_or("")
        ));
    }
    let out = bundle.join("report");
    std::fs::create_dir_all(&out)?;
    let mut summary = String::new();
    let _ =
        writeln!(summary, "status: {}  seed: {}  repeats: {}", manifest.status, manifest.seed, manifest.repeats.len());
    for table in &manifest.aggregate_tables {
        let path = bundle.join(table);
        let content = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
        let _ = writeln!(summary, "\n== {table} ==");
        let rows: Vec<Vec<&str>> = content.lines().map(|l| l.split(',').collect()).collect();
        let ncol = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let widths: Vec<usize> =
            (0..ncol).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|v| v.len()).max().unwrap_or(0)).collect();
        for r in &rows {
            let line: Vec<String> = r.iter().enumerate().map(|(c, v)| format!("{v:>w$}", w = widths[c])).collect();
            let _ = writeln!(summary, "{}", line.join("  "));
        }
    }
    let mut figures = Vec::new();
    for rep in &manifest.repeats {
        let mut curves = Vec::new();
        for v in ["pcm", "no_pcm"] {
            let p = bundle.join(rep).join(v).join("roc.csv");
            if p.exists() {
                let (pts, hw) = read_roc_csv(&p)?;
                if !pts.is_empty() {
                    curves.push((v, pts, hw));
                }
            }
        }
        if curves.is_empty() {
            continue;
        }
        let refs: Vec<(&str, &[(f64, f64)], Option<f64>)> = curves.iter().map(|(v, p, h)| (*v, &p[..], *h)).collect();
        let path = out.join(format!("{rep}_roc.svg"));
        std::fs::write(&path, roc_svg(&refs))?;
        figures.push(path);
    }
    if !warnings.is_empty() {
        let _ = writeln!(summary, "\nwarnings:");
        for w in &warnings {
            let _ = writeln!(summary, "  {w}");
        }
    }
    std::fs::write(out.join("summary.txt"), &summary)?;
    Ok(Report { summary, warnings, figures })
}
