//! Candidate survival models behind one interface: fit on landmark rows,
//! predict a residual-time survival curve for any covariate vector.

mod cox;
mod forest;
mod neural;
mod survfn;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::PcmDataset;
use crate::error::{Error, Result};

pub use cox::{fit_cox_ridge, penalized_partial_loglik, CoxModel};
pub use forest::{fit_survival_forest, ForestModel};
pub use neural::{cox_loss_and_gradient, fit_neural_cox, Activation, Network, NeuralModel};
pub use survfn::{expected_time, SurvivalFunction};

/// Rows of a survival training set: row-major features plus outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalData {
    pub n_features: usize,
    pub x: Vec<f64>,
    pub time: Vec<f64>,
    pub status: Vec<bool>,
}

impl SurvivalData {
    pub fn new(n_features: usize, x: Vec<f64>, time: Vec<f64>, status: Vec<bool>) -> Result<Self> {
        if x.len() != n_features * time.len() || time.len() != status.len() {
            return Err(Error::InvalidInput("survival data has inconsistent lengths".into()));
        }
        if time.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::InvalidInput("survival times must be finite and nonnegative".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariates must be finite".into()));
        }
        Ok(Self { n_features, x, time, status })
    }

    pub fn from_rows(rows: &PcmDataset) -> Result<Self> {
        let p = rows.n_features();
        let mut x = Vec::with_capacity(rows.len() * p);
        for r in &rows.rows {
            if r.features.len() != p {
                return Err(Error::DimensionMismatch { expected: p, got: r.features.len() });
            }
            x.extend_from_slice(&r.features);
        }
        Self::new(
            p,
            x,
            rows.rows.iter().map(|r| r.residual_time).collect(),
            rows.rows.iter().map(|r| r.status).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn n_events(&self) -> usize {
        self.status.iter().filter(|&&s| s).count()
    }

    pub fn max_time(&self) -> f64 {
        self.time.iter().copied().fold(0.0, f64::max)
    }

    /// Empirical quantile of the observed times (type-1, lower).
    pub fn time_quantile(&self, q: f64) -> f64 {
        let mut t = self.time.clone();
        t.sort_by(f64::total_cmp);
        let k = ((q * t.len() as f64).ceil() as usize).clamp(1, t.len());
        t[k - 1]
    }

    /// Row indices sorted by time descending (ties keep index order).
    pub(crate) fn order_desc(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.time[b].total_cmp(&self.time[a]));
        idx
    }
}

/// Column centring and scaling frozen from training rows. Columns listed in
/// `passthrough` keep their raw values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(p: usize) -> Self {
        Self { mean: vec![0.0; p], scale: vec![1.0; p] }
    }

    pub fn fit(data: &SurvivalData, passthrough: &[usize]) -> Self {
        let p = data.n_features;
        let n = data.len().max(1) as f64;
        let mut mean = vec![0.0; p];
        for i in 0..data.len() {
            for (m, v) in mean.iter_mut().zip(data.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for i in 0..data.len() {
            for ((s, v), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let mut scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / (n - 1.0).max(1.0)).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        for &j in passthrough {
            if j < p {
                mean[j] = 0.0;
                scale[j] = 1.0;
            }
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn apply_data(&self, data: &SurvivalData) -> SurvivalData {
        let mut out = data.clone();
        for i in 0..data.len() {
            let z = self.apply(data.row(i));
            out.x[i * data.n_features..(i + 1) * data.n_features].copy_from_slice(&z);
        }
        out
    }
}

/// Nondecreasing step cumulative hazard with `H(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeHazard {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl CumulativeHazard {
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Breslow estimator `sum_{t_k <= t} d_k / sum_{T_i >= t_k} exp(eta_i)` at the
/// distinct event times.
pub fn breslow(time: &[f64], status: &[bool], eta: &[f64]) -> CumulativeHazard {
    let n = time.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };
    // walk descending, collecting (time, d, risk sum)
    let mut steps: Vec<(f64, f64)> = Vec::new();
    let mut risk = 0.0;
    let mut i = 0;
    while i < n {
        let t = time[idx[i]];
        let mut d = 0.0;
        let mut j = i;
        while j < n && time[idx[j]] == t {
            risk += (eta[idx[j]] - shift).exp();
            if status[idx[j]] {
                d += 1.0;
            }
            j += 1;
        }
        if d > 0.0 {
            steps.push((t, d / risk * (-shift).exp()));
        }
        i = j;
    }
    steps.reverse();
    let mut cum = 0.0;
    let (times, values) = steps
        .into_iter()
        .map(|(t, inc)| {
            cum += inc;
            (t, cum)
        })
        .unzip();
    CumulativeHazard { times, values }
}

pub fn nelson_aalen(time: &[f64], status: &[bool]) -> CumulativeHazard {
    breslow(time, status, &vec![0.0; time.len()])
}

/// Survival curve `exp(-H0(t) exp(risk))` on `[0] ∪ knots(H0) ∪ [tau]`.
pub(crate) fn cox_form_curve(baseline: &CumulativeHazard, risk: f64, tau: f64) -> SurvivalFunction {
    let mult = risk.exp();
    let mut times = Vec::with_capacity(baseline.times.len() + 2);
    let mut probs = Vec::with_capacity(baseline.times.len() + 2);
    if baseline.times.first().is_none_or(|&t| t > 0.0) {
        times.push(0.0);
        probs.push(1.0);
    }
    for (&t, &h) in baseline.times.iter().zip(&baseline.values) {
        times.push(t);
        probs.push((-h * mult).exp());
    }
    if tau > *times.last().expect("non-empty") {
        times.push(tau);
        probs.push(*probs.last().expect("non-empty"));
    }
    SurvivalFunction::from_parts_unchecked(times, probs)
}

/// Facts about the training set every fitted model keeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub n_rows: usize,
    pub n_events: usize,
    /// Largest training residual time; the restricted-mean horizon.
    pub tau: f64,
    /// 95th percentile of training residual times.
    pub t95: f64,
    /// Nelson–Aalen cumulative hazard of the training rows.
    pub nelson_aalen: CumulativeHazard,
}

impl TrainingSummary {
    pub fn of(data: &SurvivalData) -> Self {
        Self {
            n_rows: data.len(),
            n_events: data.n_events(),
            tau: data.max_time(),
            t95: data.time_quantile(0.95),
            nelson_aalen: nelson_aalen(&data.time, &data.status),
        }
    }
}

/// Common prediction interface of fitted models.
pub trait SurvivalModel: Send + Sync {
    fn n_features(&self) -> usize;

    /// Predicted residual-time survival curve for raw (unscaled) features.
    fn predict_survival(&self, x: &[f64]) -> Result<SurvivalFunction>;

    fn training(&self) -> &TrainingSummary;

    /// Reference cumulative hazard for local explanations: the model's own
    /// baseline for proportional-hazards models, else the training
    /// Nelson–Aalen estimate.
    fn reference_cumhaz(&self) -> &CumulativeHazard {
        &self.training().nelson_aalen
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch { expected: self.n_features(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariates must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    CoxRidge,
    SurvivalForest,
    NeuralCox,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::CoxRidge => "cox_ridge",
            ModelKind::SurvivalForest => "survival_forest",
            ModelKind::NeuralCox => "neural_cox",
        })
    }
}

fn default_n_split() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_max_knots() -> usize {
    100
}
fn default_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    CoxRidge {
        lambda: f64,
    },
    SurvivalForest {
        n_trees: usize,
        min_leaf: usize,
        /// Features tried per split; `None` means `ceil(sqrt(p))`.
        #[serde(default)]
        mtry: Option<usize>,
        /// Random split points tried per feature; 0 tries every value.
        #[serde(default = "default_n_split")]
        n_split: usize,
        #[serde(default = "default_true")]
        bootstrap: bool,
        /// Maximum number of time knots the forest tabulates hazards on.
        #[serde(default = "default_max_knots")]
        max_knots: usize,
    },
    NeuralCox {
        /// Hidden layer widths. Empty gives a linear risk score.
        hidden: Vec<usize>,
        learning_rate: f64,
        epochs: usize,
        ridge: f64,
        #[serde(default = "default_batch")]
        batch_size: usize,
        /// Fraction of rows held out for early stopping on concordance; 0 disables.
        #[serde(default)]
        validation_fraction: f64,
        #[serde(default)]
        activation: Activation,
    },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::CoxRidge { .. } => ModelKind::CoxRidge,
            ModelSpec::SurvivalForest { .. } => ModelKind::SurvivalForest,
            ModelSpec::NeuralCox { .. } => ModelKind::NeuralCox,
        }
    }

    pub fn cox(lambda: f64) -> Self {
        ModelSpec::CoxRidge { lambda }
    }

    pub fn forest(n_trees: usize, min_leaf: usize) -> Self {
        ModelSpec::SurvivalForest { n_trees, min_leaf, mtry: None, n_split: 10, bootstrap: true, max_knots: 100 }
    }

    pub fn neural(hidden: Vec<usize>, learning_rate: f64, epochs: usize, ridge: f64) -> Self {
        ModelSpec::NeuralCox {
            hidden,
            learning_rate,
            epochs,
            ridge,
            batch_size: 256,
            validation_fraction: 0.0,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.to_string()));
        match self {
            ModelSpec::CoxRidge { lambda } => {
                if !(*lambda >= 0.0 && lambda.is_finite()) {
                    return bad("ridge lambda must be nonnegative");
                }
            }
            ModelSpec::SurvivalForest { n_trees, min_leaf, mtry, max_knots, .. } => {
                if *n_trees == 0 || *min_leaf == 0 || *max_knots < 2 || mtry == &Some(0) {
                    return bad("forest hyperparameters must be positive");
                }
            }
            ModelSpec::NeuralCox { hidden, learning_rate, epochs, ridge, batch_size, validation_fraction, .. } => {
                if hidden.len() > 2 || hidden.contains(&0) {
                    return bad("network must have at most two non-empty hidden layers");
                }
                if !(*learning_rate > 0.0) || *epochs == 0 || !(*ridge >= 0.0) || *batch_size == 0 {
                    return bad("network hyperparameters must be positive");
                }
                if !(0.0..0.9).contains(validation_fraction) {
                    return bad("validation fraction must lie in [0, 0.9)");
                }
            }
        }
        Ok(())
    }

    /// Short human-readable label, e.g. `cox_ridge(lambda=0.1)`.
    pub fn label(&self) -> String {
        match self {
            ModelSpec::CoxRidge { lambda } => format!("cox_ridge(lambda={lambda})"),
            ModelSpec::SurvivalForest { n_trees, min_leaf, .. } => {
                format!("survival_forest(n_trees={n_trees},min_leaf={min_leaf})")
            }
            ModelSpec::NeuralCox { hidden, learning_rate, .. } => {
                let h: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                format!("neural_cox(hidden=[{}],lr={learning_rate})", h.join(";"))
            }
        }
    }

    /// Fits the model. `passthrough` lists features exempt from scaling
    /// (the treatment indicator).
    pub fn fit(&self, data: &SurvivalData, passthrough: &[usize], seed: u64) -> Result<FittedModel> {
        self.validate()?;
        match self {
            ModelSpec::CoxRidge { lambda } => fit_cox_ridge(data, *lambda, passthrough).map(FittedModel::CoxRidge),
            ModelSpec::SurvivalForest { .. } => fit_survival_forest(data, self, seed).map(FittedModel::SurvivalForest),
            ModelSpec::NeuralCox { .. } => fit_neural_cox(data, self, passthrough, seed).map(FittedModel::NeuralCox),
        }
    }
}

/// Default candidate grids for model selection.
pub fn default_grid(kinds: &[ModelKind], n_trees: usize) -> Vec<ModelSpec> {
    let mut specs = Vec::new();
    for kind in kinds {
        match kind {
            ModelKind::CoxRidge => specs.extend([0.01, 0.1, 1.0].map(ModelSpec::cox)),
            ModelKind::SurvivalForest => specs.extend([10, 25].map(|leaf| ModelSpec::forest(n_trees, leaf))),
            ModelKind::NeuralCox => {
                for hidden in [vec![8], vec![32], vec![32, 16]] {
                    for lr in [1e-3, 1e-2] {
                        specs.push(ModelSpec::NeuralCox {
                            hidden: hidden.clone(),
                            learning_rate: lr,
                            epochs: 200,
                            ridge: 0.01,
                            batch_size: 256,
                            validation_fraction: 0.2,
                            activation: Activation::Relu,
                        });
                    }
                }
            }
        }
    }
    specs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum FittedModel {
    CoxRidge(CoxModel),
    SurvivalForest(ForestModel),
    NeuralCox(NeuralModel),
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            FittedModel::CoxRidge(_) => ModelKind::CoxRidge,
            FittedModel::SurvivalForest(_) => ModelKind::SurvivalForest,
            FittedModel::NeuralCox(_) => ModelKind::NeuralCox,
        }
    }

    fn inner(&self) -> &dyn SurvivalModel {
        match self {
            FittedModel::CoxRidge(m) => m,
            FittedModel::SurvivalForest(m) => m,
            FittedModel::NeuralCox(m) => m,
        }
    }
}

impl SurvivalModel for FittedModel {
    fn n_features(&self) -> usize {
        self.inner().n_features()
    }

    fn predict_survival(&self, x: &[f64]) -> Result<SurvivalFunction> {
        self.inner().predict_survival(x)
    }

    fn training(&self) -> &TrainingSummary {
        self.inner().training()
    }

    fn reference_cumhaz(&self) -> &CumulativeHazard {
        self.inner().reference_cumhaz()
    }
}

/// Current model artifact format.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub feature_names: Vec<String>,
    pub model: FittedModel,
}

impl ModelArtifact {
    pub fn new(model: FittedModel, feature_names: Vec<String>) -> Self {
        Self { format_version: ARTIFACT_VERSION, feature_names, model }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let artifact: ModelArtifact = serde_json::from_str(&text)?;
        if artifact.format_version != ARTIFACT_VERSION {
            return Err(Error::Configuration(format!(
                "model artifact version {} is not supported (expected {ARTIFACT_VERSION})",
                artifact.format_version
            )));
        }
        Ok(artifact)
    }
}
