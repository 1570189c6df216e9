#![allow(dead_code)]

use pcmvt_core::dataset::{PcmDataset, PcmMode, PcmRow};
use pcmvt_core::evaluation::{ctd_counts, nested_cv, CvPlan};
use pcmvt_core::explain::{explain_instance, fit_surrogate_inf, log_hazard_ratios, perturb, ExplainConfig, LocalSpace};
use pcmvt_core::seed::rng_from_seed;
use pcmvt_core::survmodels::*;
use pcmvt_core::trialsim::{default_grid, gen_survival_time};
use pcmvt_core::Result;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

/// Asymptotic Kolmogorov p-value for a one-sample KS statistic `d` on `n`
/// points, with the usual small-sample correction of the argument.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let sign = if k as i64 % 2 == 1 { 1.0 } else { -1.0 };
        p += sign * (-2.0 * k * k * lambda * lambda).exp();
    }
    (2.0 * p).clamp(0.0, 1.0)
}

/// One-sample KS statistic of `sample` against the continuous CDF `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Cox data with standard normal covariates, unit exponential baseline and
/// uniform censoring on [0, 3].
pub fn synthetic(n: usize, beta: &[f64], seed: u64) -> SurvivalData {
    let mut rng = rng_from_seed(seed);
    let p = beta.len();
    let (mut x, mut time, mut status) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let row: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let lp: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        let e: f64 = Exp1.sample(&mut rng);
        let t = e / lp.exp();
        let c = rng.gen::<f64>() * 3.0;
        time.push(t.min(c));
        status.push(t <= c);
        x.extend(row);
    }
    SurvivalData::new(p, x, time, status).unwrap()
}

pub const BETA: [f64; 3] = [1.0, -0.8, 0.5];

/// Baseline-only rows from a three-covariate Cox model with exponential
/// baseline, censored at 2.
pub fn cox_rows(n: usize, seed: u64) -> PcmDataset {
    let mut rng = rng_from_seed(seed);
    let rows = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let arm = (i % 2) as u8;
            let eta: f64 = x.iter().zip(BETA).map(|(a, b)| a * b).sum();
            let e: f64 = Exp1.sample(&mut rng);
            let t = e / eta.exp();
            let (time, status) = if t > 2.0 { (2.0, false) } else { (t, true) };
            let mut features = x;
            features.push(f64::from(arm));
            PcmRow {
                patient_id: format!("P{i}"),
                patient: i,
                arm,
                landmark: 0.0,
                features,
                residual_time: time,
                status,
            }
        })
        .collect();
    PcmDataset {
        covariate_names: vec!["A".into(), "B".into(), "C".into()],
        mode: PcmMode::BaselineOnly,
        rows,
        normalization: None,
    }
}

pub fn random_curves(n: usize, seed: u64, tie_prone: bool) -> (Vec<SurvivalFunction>, Vec<(f64, bool)>) {
    let mut rng = rng_from_seed(seed);
    let grid: Vec<f64> = (0..=20).map(|k| k as f64 * 0.5).collect();
    let curves = (0..n)
        .map(|_| {
            let mut p = 1.0;
            let probs: Vec<f64> = grid
                .iter()
                .map(|_| {
                    let drop: f64 =
                        if tie_prone { f64::from(rng.gen_range(0u8..3)) * 0.05 } else { rng.gen::<f64>() * 0.1 };
                    p = (p - drop).max(0.0);
                    p
                })
                .collect();
            SurvivalFunction::new(grid.clone(), probs).unwrap()
        })
        .collect();
    let outcomes = (0..n)
        .map(|_| {
            let t = if tie_prone { f64::from(rng.gen_range(1u8..20)) * 0.5 } else { rng.gen::<f64>() * 10.0 };
            (t, rng.gen_bool(0.7))
        })
        .collect();
    (curves, outcomes)
}

/// Exhaustive enumeration of ordered pairs, written independently of the
/// library's sorted scan. Returns (2 * concordant + ties, comparable pairs).
pub fn brute_force(curves: &[SurvivalFunction], outcomes: &[(f64, bool)]) -> (u64, u64) {
    let (mut num, mut pairs) = (0u64, 0u64);
    for i in 0..curves.len() {
        for j in 0..curves.len() {
            let ((ti, di), (tj, _)) = (outcomes[i], outcomes[j]);
            if i == j || !di || !(ti < tj) {
                continue;
            }
            pairs += 1;
            let (si, sj) = (curves[i].eval(ti), curves[j].eval(ti));
            num += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Less => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Greater => 0,
            };
        }
    }
    (num, pairs)
}

/// p-value of the KS test of constant-`c` simulated times against
/// `1 - exp(-e^c t^2)`.
pub fn weibull_ks_p(c: f64, n: usize, seed: u64) -> f64 {
    let grid = default_grid();
    let lp = vec![c; grid.len()];
    let mut rng = rng_from_seed(seed);
    let times: Vec<f64> = (0..n).map(|_| gen_survival_time(&grid, &lp, 1e9, &mut rng).unwrap().0).collect();
    ks_p_value(ks_statistic(&times, |t| 1.0 - (-c.exp() * t * t).exp()), n)
}

/// Number of random 50-subject instances where the library's concordance
/// counts differ from pair enumeration.
pub fn ctd_mismatches(instances: u64) -> usize {
    (0..instances)
        .filter(|&seed| {
            let (curves, outcomes) = random_curves(50, seed, seed % 2 == 0);
            let c = ctd_counts(&curves, &outcomes).unwrap();
            (c.doubled_concordant, c.pairs) != brute_force(&curves, &outcomes)
        })
        .count()
}

/// Mean outer concordance of nested CV when outcomes are shuffled across rows.
pub fn permuted_label_mean_ctd(reps: u64) -> f64 {
    let scores: Vec<f64> = (0..reps)
        .map(|rep| {
            let mut rows = cox_rows(150, 500 + rep);
            let mut outcomes: Vec<(f64, bool)> = rows.rows.iter().map(|r| (r.residual_time, r.status)).collect();
            outcomes.shuffle(&mut rng_from_seed(rep));
            for (r, (t, d)) in rows.rows.iter_mut().zip(outcomes) {
                r.residual_time = t;
                r.status = d;
            }
            nested_cv(&rows, &[ModelSpec::cox(0.01), ModelSpec::cox(1.0)], &CvPlan::default(), rep)
                .unwrap()
                .mean_outer_ctd
        })
        .collect();
    mean(&scores)
}

/// Largest relative error between the analytic loss gradient and central
/// differences (step 1e-5), over `n` small random networks.
pub fn max_gradient_rel_error(n: u64) -> f64 {
    let data = synthetic(40, &[0.5, -0.5, 0.2], 8);
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let hidden: Vec<usize> = if seed % 2 == 0 { vec![4] } else { vec![3, 2] };
        let act = if seed % 3 == 0 { Activation::Identity } else { Activation::Relu };
        let mut net = Network::init(3, &hidden, act, seed);
        // zero biases put dead ReLU units exactly on the kink; move off it
        let mut rng = rng_from_seed(100 + seed);
        let base: Vec<f64> = net.params().iter().map(|p| p + 0.1 * rng.gen::<f64>() + 0.05).collect();
        net.set_params(&base);
        let (_, grad) = cox_loss_and_gradient(&net, &data, 0.1);
        let h = 1e-5;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            net.set_params(&p);
            let up = cox_loss_and_gradient(&net, &data, 0.1).0;
            p[k] -= 2.0 * h;
            net.set_params(&p);
            let down = cox_loss_and_gradient(&net, &data, 0.1).0;
            net.set_params(&base);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3));
        }
    }
    worst
}

/// Largest coefficient gap between a network without hidden layers and
/// `fit_cox_ridge` at the same penalty.
pub fn linear_network_gap() -> f64 {
    let data = synthetic(300, &[0.8, -0.5, 0.3], 4);
    let lambda = 0.5;
    let cox = fit_cox_ridge(&data, lambda, &[]).unwrap();
    let spec = ModelSpec::NeuralCox {
        hidden: vec![],
        learning_rate: 0.01,
        epochs: 3000,
        ridge: lambda,
        batch_size: 10_000,
        validation_fraction: 0.0,
        activation: Activation::Relu,
    };
    let net = fit_neural_cox(&data, &spec, &[], 1).unwrap();
    let b = net.network.linear_coefficients().unwrap();
    b.iter().zip(&cox.beta).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max)
}

/// H0(t) = 0.05 t^2 tabulated at 0.25 steps up to 10.
pub fn quadratic_baseline() -> CumulativeHazard {
    let times: Vec<f64> = (1..=40).map(|k| k as f64 * 0.25).collect();
    let values = times.iter().map(|t| 0.05 * t * t).collect();
    CumulativeHazard { times, values }
}

pub fn quadratic_summary() -> TrainingSummary {
    TrainingSummary { n_rows: 100, n_events: 50, tau: 10.0, t95: 9.5, nelson_aalen: quadratic_baseline() }
}

pub fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

/// Black box with hazard `H0(t) exp(f(x, t))`: proportional hazards only when
/// `f` ignores `t`.
pub struct Bent {
    pub p: usize,
    pub training: TrainingSummary,
    pub f: fn(&[f64], f64) -> f64,
}

impl SurvivalModel for Bent {
    fn n_features(&self) -> usize {
        self.p
    }

    fn predict_survival(&self, x: &[f64]) -> Result<SurvivalFunction> {
        let h0 = &self.training.nelson_aalen;
        let probs: Vec<f64> =
            h0.times.iter().zip(&h0.values).map(|(&t, &h)| (-h * (self.f)(x, t).exp()).exp()).collect();
        SurvivalFunction::new(h0.times.clone(), probs)
    }

    fn training(&self) -> &TrainingSummary {
        &self.training
    }
}

/// Largest `|b - b*|` over `instances` random points when the black box is a
/// Cox model with known coefficients on five free covariates (plus a frozen
/// treatment indicator). Also returns the largest surrogate objective.
pub fn cox_recovery_error(instances: u64) -> (f64, f64) {
    let b_star = [0.8, -0.5, 0.3, 0.0, -1.2, 0.6];
    let model = CoxModel::from_parts(b_star.to_vec(), quadratic_baseline(), quadratic_summary());
    let frozen = vec![false, false, false, false, false, true];
    let config = ExplainConfig { n_perturbations: 200, ..ExplainConfig::default() };
    let space = LocalSpace::new(names(6), frozen, vec![1.0; 6], &config).unwrap();
    let mut rng = rng_from_seed(3);
    let (mut err, mut obj): (f64, f64) = (0.0, 0.0);
    for k in 0..instances {
        let mut x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        x.push((k % 2) as f64);
        let e = explain_instance(&model, &x, &space, &config, k).unwrap();
        assert_eq!(e.covariates, names(5));
        err = e.log_hr.iter().zip(&b_star).map(|(b, s)| (b - s).abs()).fold(err, f64::max);
        obj = obj.max(e.objective);
    }
    (err, obj)
}

/// Weighted median of `v`: a minimiser of `sum w_i |v_i - c|`.
pub fn weighted_median(v: &[f64], w: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let half = w.iter().sum::<f64>() / 2.0;
    let mut acc = 0.0;
    for &i in &idx {
        acc += w[i];
        if acc >= half {
            return v[i];
        }
    }
    v[idx[idx.len() - 1]]
}

/// For a two-covariate non-proportional black box and 50 samples, how far the
/// solver's objective lies above the best point of a grid over [-2, 2]^2 with
/// step 0.01 (negative when the solver is better). Maximum over `seeds`
/// instances, together with the largest disagreement between the reported
/// objective and a direct evaluation of it.
pub fn grid_oracle_excess(seeds: u64) -> (f64, f64) {
    let model =
        Bent { p: 2, training: quadratic_summary(), f: |x, t| x[0].sin() + 0.3 * x[1] * x[1] * t / 10.0 - 0.5 * x[1] };
    let config = ExplainConfig { n_perturbations: 50, ..ExplainConfig::default() };
    let space = LocalSpace::new(names(2), vec![false; 2], vec![1.0; 2], &config).unwrap();
    let (mut excess, mut mismatch) = (f64::NEG_INFINITY, 0.0f64);
    for seed in 0..seeds {
        let x_star = [0.3 * seed as f64, -0.2];
        let samples = perturb(&x_star, &space, 50, &mut rng_from_seed(seed));
        let e = fit_surrogate_inf(&model, &x_star, &samples, &space, &config).unwrap();

        let (_, phi) = log_hazard_ratios(&model, &samples.z).unwrap();
        let phi: Vec<Vec<f64>> = phi.into_iter().map(Option::unwrap).collect();
        let dx: Vec<[f64; 2]> = samples.z.iter().map(|z| [z[0] - x_star[0], z[1] - x_star[1]]).collect();
        // direct objective: weighted sum over samples of the worst residual over time
        let direct = |c: f64, b: [f64; 2]| -> f64 {
            (0..phi.len())
                .map(|i| {
                    let fit = c + b[0] * dx[i][0] + b[1] * dx[i][1];
                    samples.w[i] * phi[i].iter().map(|v| (v - fit).abs()).fold(0.0, f64::max)
                })
                .sum()
        };
        let returned = direct(e.intercept, [e.log_hr[0], e.log_hr[1]]);
        mismatch = mismatch.max((returned - e.objective).abs());

        // for fixed b the best intercept is a weighted median of the midrange residuals
        let mid: Vec<f64> = phi
            .iter()
            .map(|v| (v.iter().copied().fold(f64::MIN, f64::max) + v.iter().copied().fold(f64::MAX, f64::min)) / 2.0)
            .collect();
        let mut grid_best = f64::INFINITY;
        for a in -200..=200 {
            for b in -200..=200 {
                let beta = [a as f64 * 0.01, b as f64 * 0.01];
                let shifted: Vec<f64> =
                    (0..mid.len()).map(|i| mid[i] - beta[0] * dx[i][0] - beta[1] * dx[i][1]).collect();
                let c = weighted_median(&shifted, &samples.w);
                grid_best = grid_best.min(direct(c, beta));
            }
        }
        excess = excess.max(returned - grid_best);
    }
    (excess, mismatch)
}
