use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    breslow, cox_form_curve, CumulativeHazard, ModelSpec, Standardizer, SurvivalData, SurvivalFunction, SurvivalModel,
    TrainingSummary,
};
use crate::error::{Error, Result};
use crate::evaluation::ctd;
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out x n_in`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Feedforward risk network: hidden layers with an activation, then a
/// bias-free linear output (a bias is not identifiable in a Cox model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Dense>,
    output: Vec<f64>,
    activation: Activation,
}

impl Network {
    /// Random initialisation (He for hidden layers). A network without hidden
    /// layers starts at zero.
    pub fn init(n_in: usize, hidden: &[usize], activation: Activation, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut layers = Vec::new();
        let mut width = n_in;
        for &h in hidden {
            let dist = Normal::new(0.0, (2.0 / width as f64).sqrt()).expect("positive sd");
            layers.push(Dense {
                n_in: width,
                n_out: h,
                weights: (0..h * width).map(|_| dist.sample(&mut rng)).collect(),
                bias: vec![0.0; h],
            });
            width = h;
        }
        let output = if hidden.is_empty() {
            vec![0.0; n_in]
        } else {
            let dist = Normal::new(0.0, (1.0 / width as f64).sqrt()).expect("positive sd");
            (0..width).map(|_| dist.sample(&mut rng)).collect()
        };
        Self { layers, output, activation }
    }

    pub fn n_inputs(&self) -> usize {
        self.layers.first().map_or(self.output.len(), |l| l.n_in)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum::<usize>() + self.output.len()
    }

    /// Flattened parameters: per layer weights then bias, then output weights.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v.extend_from_slice(&self.output);
        v
    }

    pub fn set_params(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.n_params());
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&v[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&v[k..k + nb]);
            k += nb;
        }
        self.output.copy_from_slice(&v[k..]);
    }

    /// Mask of parameters that carry the ridge penalty (weights, not biases).
    fn penalized_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            m.extend(std::iter::repeat_n(true, l.weights.len()));
            m.extend(std::iter::repeat_n(false, l.bias.len()));
        }
        m.extend(std::iter::repeat_n(true, self.output.len()));
        m
    }

    /// Output weights of a network without hidden layers.
    pub fn linear_coefficients(&self) -> Option<&[f64]> {
        self.layers.is_empty().then_some(&self.output[..])
    }

    pub fn risk(&self, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        for l in &self.layers {
            h = (0..l.n_out)
                .map(|o| {
                    let w = &l.weights[o * l.n_in..(o + 1) * l.n_in];
                    self.activation.apply(l.bias[o] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
                })
                .collect();
        }
        self.output.iter().zip(&h).map(|(a, b)| a * b).sum()
    }

    /// Forward pass keeping pre-activations, then backpropagates `dloss_drisk`.
    fn backward(&self, x: &[f64], dloss_drisk: f64, grad: &mut [f64]) {
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for l in &self.layers {
            let pre: Vec<f64> = (0..l.n_out)
                .map(|o| {
                    let w = &l.weights[o * l.n_in..(o + 1) * l.n_in];
                    l.bias[o] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            inputs.push(h);
            h = pre.iter().map(|&v| self.activation.apply(v)).collect();
            pres.push(pre);
        }
        // offsets of each layer's block in the flat parameter vector
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.weights.len() + l.bias.len();
        }
        for (g, hv) in grad[k..].iter_mut().zip(&h) {
            *g += dloss_drisk * hv;
        }
        let mut delta: Vec<f64> = self.output.iter().map(|w| w * dloss_drisk).collect();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let d_pre: Vec<f64> =
                delta.iter().zip(&pres[li]).map(|(d, &p)| d * self.activation.derivative(p)).collect();
            let off = offsets[li];
            let input = &inputs[li];
            for o in 0..l.n_out {
                let row = &mut grad[off + o * l.n_in..off + (o + 1) * l.n_in];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d_pre[o] * xi;
                }
                grad[off + l.weights.len() + o] += d_pre[o];
            }
            if li > 0 {
                delta = (0..l.n_in).map(|i| (0..l.n_out).map(|o| l.weights[o * l.n_in + i] * d_pre[o]).sum()).collect();
            }
        }
    }
}

/// Negative Breslow log partial likelihood of `risk` on `rows` and its
/// derivative with respect to each row's risk. Also returns the event count.
fn neg_partial_loglik(data: &SurvivalData, rows: &[usize], risk: &[f64]) -> (f64, Vec<f64>, usize) {
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.time[rows[b]].total_cmp(&data.time[rows[a]]));
    let shift = risk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = risk.iter().map(|r| (r - shift).exp()).collect();

    // descending sweep: risk-set sums per tie group
    let mut groups: Vec<(usize, usize, f64, f64)> = Vec::new(); // (start, end, s0, d)
    let mut s0 = 0.0;
    let mut loss = 0.0;
    let mut n_events = 0;
    let mut i = 0;
    while i < n {
        let t = data.time[rows[order[i]]];
        let mut j = i;
        while j < n && data.time[rows[order[j]]] == t {
            s0 += w[order[j]];
            j += 1;
        }
        let d = order[i..j].iter().filter(|&&k| data.status[rows[k]]).count();
        if d > 0 {
            for &k in order[i..j].iter().filter(|&&k| data.status[rows[k]]) {
                loss -= risk[k] - shift;
            }
            loss += d as f64 * s0.ln();
            n_events += d;
        }
        groups.push((i, j, s0, d as f64));
        i = j;
    }
    // ascending sweep: cumulative sum of d_g / s0_g over groups with t_g <= t_k
    let mut grad = vec![0.0; n];
    let mut cum = 0.0;
    for &(start, end, s0g, d) in groups.iter().rev() {
        if d > 0.0 {
            cum += d / s0g;
        }
        for &k in &order[start..end] {
            grad[k] = w[k] * cum - if data.status[rows[k]] { 1.0 } else { 0.0 };
        }
    }
    (loss, grad, n_events)
}

/// Training loss on `rows`: `(-log PL + ridge * ||weights||^2) / events`,
/// with its gradient in the flat parameter layout of [`Network::params`].
fn loss_on_rows(net: &Network, data: &SurvivalData, rows: &[usize], ridge: f64) -> (f64, Vec<f64>) {
    let risk: Vec<f64> = rows.iter().map(|&i| net.risk(data.row(i))).collect();
    let (nll, drisk, n_events) = neg_partial_loglik(data, rows, &risk);
    let denom = n_events.max(1) as f64;
    let mut grad = vec![0.0; net.n_params()];
    for (k, &i) in rows.iter().enumerate() {
        if drisk[k] != 0.0 {
            net.backward(data.row(i), drisk[k], &mut grad);
        }
    }
    let params = net.params();
    let mask = net.penalized_mask();
    let mut penalty = 0.0;
    for ((g, p), &m) in grad.iter_mut().zip(&params).zip(&mask) {
        if m {
            penalty += p * p;
            *g += 2.0 * ridge * p;
        }
        *g /= denom;
    }
    ((nll + ridge * penalty) / denom, grad)
}

/// Full-data loss and analytic gradient (for verification against finite
/// differences).
pub fn cox_loss_and_gradient(net: &Network, data: &SurvivalData, ridge: f64) -> (f64, Vec<f64>) {
    let rows: Vec<usize> = (0..data.len()).collect();
    loss_on_rows(net, data, &rows, ridge)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Neural Cox model (DeepSurv-style) with Breslow baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub standardizer: Standardizer,
    pub network: Network,
    pub baseline: CumulativeHazard,
    pub epochs_run: usize,
    pub training: TrainingSummary,
}

const CHECK_EVERY: usize = 10;
const PATIENCE: usize = 5;

pub fn fit_neural_cox(data: &SurvivalData, spec: &ModelSpec, passthrough: &[usize], seed: u64) -> Result<NeuralModel> {
    let ModelSpec::NeuralCox { hidden, learning_rate, epochs, ridge, batch_size, validation_fraction, activation } =
        spec
    else {
        return Err(Error::Configuration("not a neural Cox spec".into()));
    };
    if data.n_events() == 0 {
        return Err(Error::UnfitModel("no observed events".into()));
    }
    let standardizer = Standardizer::fit(data, passthrough);
    let scaled = standardizer.apply_data(data);
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let mut net = Network::init(scaled.n_features, hidden, *activation, derive_seed(seed, 0));

    let mut all: Vec<usize> = (0..scaled.len()).collect();
    let (train, valid): (Vec<usize>, Vec<usize>) = if *validation_fraction > 0.0 {
        all.shuffle(&mut rng);
        let n_valid = ((scaled.len() as f64) * validation_fraction).round() as usize;
        let valid = all[..n_valid].to_vec();
        let mut train = all[n_valid..].to_vec();
        train.sort_unstable();
        (train, valid)
    } else {
        (all, Vec::new())
    };
    let has_valid_events = valid.iter().any(|&i| scaled.status[i]);

    let mut params = net.params();
    let mut adam = Adam::new(params.len(), *learning_rate);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    let mut order = train.clone();
    let mut epochs_run = 0;
    for epoch in 0..*epochs {
        epochs_run = epoch + 1;
        if *batch_size < order.len() {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(*batch_size) {
            net.set_params(&params);
            let (loss, grad) = loss_on_rows(&net, &scaled, batch, *ridge);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            adam.step(&mut params, &grad);
        }
        if has_valid_events && (epoch + 1) % CHECK_EVERY == 0 {
            net.set_params(&params);
            let score = validation_concordance(&net, &scaled, &train, &valid);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= PATIENCE {
                    break;
                }
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    net.set_params(&params);

    let eta: Vec<f64> = (0..scaled.len()).map(|i| net.risk(scaled.row(i))).collect();
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { epoch: epochs_run });
    }
    let baseline = breslow(&scaled.time, &scaled.status, &eta);
    Ok(NeuralModel { standardizer, network: net, baseline, epochs_run, training: TrainingSummary::of(data) })
}

fn validation_concordance(net: &Network, data: &SurvivalData, train: &[usize], valid: &[usize]) -> f64 {
    let eta: Vec<f64> = train.iter().map(|&i| net.risk(data.row(i))).collect();
    let time: Vec<f64> = train.iter().map(|&i| data.time[i]).collect();
    let status: Vec<bool> = train.iter().map(|&i| data.status[i]).collect();
    let baseline = breslow(&time, &status, &eta);
    let tau = time.iter().copied().fold(0.0, f64::max);
    let curves: Vec<SurvivalFunction> =
        valid.iter().map(|&i| cox_form_curve(&baseline, net.risk(data.row(i)), tau)).collect();
    let outcomes: Vec<(f64, bool)> = valid.iter().map(|&i| (data.time[i], data.status[i])).collect();
    ctd(&curves, &outcomes).unwrap_or(0.5)
}

impl NeuralModel {
    pub fn risk(&self, x: &[f64]) -> f64 {
        self.network.risk(&self.standardizer.apply(x))
    }
}

impl SurvivalModel for NeuralModel {
    fn n_features(&self) -> usize {
        self.network.n_inputs()
    }

    fn predict_survival(&self, x: &[f64]) -> Result<SurvivalFunction> {
        self.check_dim(x)?;
        Ok(cox_form_curve(&self.baseline, self.risk(x), self.training.tau))
    }

    fn training(&self) -> &TrainingSummary {
        &self.training
    }

    fn reference_cumhaz(&self) -> &CumulativeHazard {
        &self.baseline
    }
}
