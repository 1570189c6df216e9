use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    breslow, cox_form_curve, CumulativeHazard, Standardizer, SurvivalData, SurvivalFunction, SurvivalModel,
    TrainingSummary,
};
use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-8;

/// Ridge-penalised Cox proportional hazards model (Breslow ties).
///
/// Coefficients act on standardized features; `risk(x) = beta . scale(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub standardizer: Standardizer,
    pub beta: Vec<f64>,
    pub baseline: CumulativeHazard,
    pub lambda: f64,
    pub iterations: usize,
    pub training: TrainingSummary,
}

/// Penalised log partial likelihood, its gradient and Hessian.
struct Derivatives {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn penalized_loglik(
    data: &SurvivalData,
    order: &[usize],
    beta: &[f64],
    lambda: f64,
    with_hessian: bool,
) -> Derivatives {
    let p = data.n_features;
    let n = data.len();
    let eta: Vec<f64> = (0..n).map(|i| dot(data.row(i), beta)).collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut value = 0.0;
    let mut grad = DVector::<f64>::zeros(p);
    let mut hess = DMatrix::<f64>::zeros(p, p);
    let mut s0 = 0.0;
    let mut s1 = DVector::<f64>::zeros(p);
    let mut s2 = DMatrix::<f64>::zeros(p, p);

    let mut i = 0;
    while i < n {
        let t = data.time[order[i]];
        let mut j = i;
        while j < n && data.time[order[j]] == t {
            let r = order[j];
            let w = (eta[r] - shift).exp();
            let x = data.row(r);
            s0 += w;
            for a in 0..p {
                s1[a] += w * x[a];
                if with_hessian {
                    for b in a..p {
                        s2[(a, b)] += w * x[a] * x[b];
                    }
                }
            }
            j += 1;
        }
        let d = order[i..j].iter().filter(|&&r| data.status[r]).count();
        if d > 0 {
            let df = d as f64;
            let mean = &s1 / s0;
            for &r in order[i..j].iter().filter(|&&r| data.status[r]) {
                value += eta[r] - shift;
                for (g, x) in grad.iter_mut().zip(data.row(r)) {
                    *g += x;
                }
            }
            value -= df * s0.ln();
            grad -= &mean * df;
            if with_hessian {
                for a in 0..p {
                    for b in a..p {
                        let v = df * (s2[(a, b)] / s0 - mean[a] * mean[b]);
                        hess[(a, b)] -= v;
                    }
                }
            }
        }
        i = j;
    }
    if with_hessian {
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
    }
    let norm2: f64 = beta.iter().map(|b| b * b).sum();
    value -= lambda * norm2;
    for a in 0..p {
        grad[a] -= 2.0 * lambda * beta[a];
        hess[(a, a)] -= 2.0 * lambda;
    }
    Derivatives { value, grad, hess }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximises `log PL(beta) - lambda ||beta||^2` by damped Newton iterations.
pub(crate) fn newton_solve(data: &SurvivalData, lambda: f64) -> Result<(Vec<f64>, usize)> {
    let p = data.n_features;
    let order = data.order_desc();
    let mut beta = vec![0.0; p];
    let mut cur = penalized_loglik(data, &order, &beta, lambda, true);
    // the log partial likelihood is a sum over events, so its gradient scales with them
    let tol = GRAD_TOL * (1.0 + data.n_events() as f64);
    for iter in 0..MAX_ITER {
        let gnorm = cur.grad.amax();
        if gnorm < tol {
            return Ok((beta, iter));
        }
        let neg_h = -&cur.hess;
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&cur.grad),
            None => {
                let jitter = 1e-8 * (1.0 + neg_h.diagonal().amax());
                let reg = neg_h + DMatrix::<f64>::identity(p, p) * jitter;
                match reg.cholesky() {
                    Some(ch) => ch.solve(&cur.grad),
                    None => cur.grad.clone(),
                }
            }
        };
        // Newton decrement: predicted gain of the full step
        if cur.grad.dot(&step) < 1e-14 * (1.0 + cur.value.abs()) {
            return Ok((beta, iter));
        }
        // step halving keeps the objective from decreasing
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let next = penalized_loglik(data, &order, &trial, lambda, false);
            if next.value.is_finite() && next.value >= cur.value {
                accepted = Some(trial);
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some(trial) => {
                let moved = trial.iter().zip(&beta).any(|(a, b)| a != b);
                beta = trial;
                cur = penalized_loglik(data, &order, &beta, lambda, true);
                if !moved {
                    // objective flat to machine precision
                    if cur.grad.amax() < tol.sqrt() {
                        return Ok((beta, iter + 1));
                    }
                    return Err(Error::NonConvergence { iterations: iter + 1, gradient_norm: cur.grad.amax() });
                }
            }
            None => {
                if gnorm < tol.sqrt() {
                    return Ok((beta, iter));
                }
                return Err(Error::NonConvergence { iterations: iter, gradient_norm: gnorm });
            }
        }
    }
    let gnorm = cur.grad.amax();
    if gnorm < tol {
        Ok((beta, MAX_ITER))
    } else {
        Err(Error::NonConvergence { iterations: MAX_ITER, gradient_norm: gnorm })
    }
}

/// Penalised log partial likelihood at `beta` on already-scaled data.
pub fn penalized_partial_loglik(data: &SurvivalData, beta: &[f64], lambda: f64) -> f64 {
    penalized_loglik(data, &data.order_desc(), beta, lambda, false).value
}

pub fn fit_cox_ridge(data: &SurvivalData, lambda: f64, passthrough: &[usize]) -> Result<CoxModel> {
    if data.n_events() == 0 {
        return Err(Error::UnfitModel("no observed events".into()));
    }
    let standardizer = Standardizer::fit(data, passthrough);
    let scaled = standardizer.apply_data(data);
    let (beta, iterations) = newton_solve(&scaled, lambda)?;
    let eta: Vec<f64> = (0..scaled.len()).map(|i| dot(scaled.row(i), &beta)).collect();
    let baseline = breslow(&scaled.time, &scaled.status, &eta);
    Ok(CoxModel { standardizer, beta, baseline, lambda, iterations, training: TrainingSummary::of(data) })
}

impl CoxModel {
    /// Builds a model from raw-scale coefficients and a baseline.
    pub fn from_parts(beta: Vec<f64>, baseline: CumulativeHazard, training: TrainingSummary) -> Self {
        let p = beta.len();
        Self { standardizer: Standardizer::identity(p), beta, baseline, lambda: 0.0, iterations: 0, training }
    }

    pub fn risk(&self, x: &[f64]) -> f64 {
        dot(&self.standardizer.apply(x), &self.beta)
    }

    /// Coefficients on the raw feature scale (log hazard ratio per unit).
    pub fn raw_coefficients(&self) -> Vec<f64> {
        self.beta.iter().zip(&self.standardizer.scale).map(|(b, s)| b / s).collect()
    }
}

impl SurvivalModel for CoxModel {
    fn n_features(&self) -> usize {
        self.beta.len()
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use rand::Rng;
    use rand_distr::{Distribution, Exp1, StandardNormal};

    pub(crate) fn synthetic(n: usize, beta: &[f64], seed: u64) -> SurvivalData {
        let mut rng = rng_from_seed(seed);
        let p = beta.len();
        let mut x = Vec::new();
        let mut time = Vec::new();
        let mut status = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let e: f64 = Exp1.sample(&mut rng);
            let t = e / dot(&row, beta).exp();
            let c = rng.gen::<f64>() * 3.0;
            time.push(t.min(c));
            status.push(t <= c);
            x.extend(row);
        }
        SurvivalData::new(p, x, time, status).unwrap()
    }

    #[test]
    fn huge_penalty_shrinks_to_zero() {
        let data = synthetic(200, &[0.8, -0.5], 1);
        let m = fit_cox_ridge(&data, 1e9, &[]).unwrap();
        assert!(m.beta.iter().all(|b| b.abs() < 1e-4), "{:?}", m.beta);
    }

    #[test]
    fn recovers_generating_coefficients() {
        let data = synthetic(3000, &[0.8, -0.5, 0.0], 2);
        let m = fit_cox_ridge(&data, 0.0, &[]).unwrap();
        let raw = m.raw_coefficients();
        for (b, want) in raw.iter().zip([0.8, -0.5, 0.0]) {
            assert!((b - want).abs() < 0.1, "{raw:?}");
        }
    }

    #[test]
    fn two_events_binary_covariate_matches_grid_search() {
        // times 1..5, events at 1 (x=1) and 3 (x=0); others censored
        let x = vec![1.0, 0.0, 0.0, 1.0, 0.0];
        let time = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let status = vec![true, false, true, false, false];
        let data = SurvivalData::new(1, x.clone(), time.clone(), status.clone()).unwrap();
        let (beta, _) = newton_solve(&data, 0.0).unwrap();

        // oracle: partial likelihood written out by hand, maximised on a grid of step 1e-4
        let pl = |b: f64| {
            let risk = |i: usize| (b * x[i]).exp();
            (b * 1.0 - (0..5).map(risk).sum::<f64>().ln()) + (0.0 - (2..5).map(risk).sum::<f64>().ln())
        };
        let best = (-50_000..=50_000).map(|k| k as f64 * 1e-4).max_by(|a, b| pl(*a).total_cmp(&pl(*b))).unwrap();
        assert!((beta[0] - best).abs() < 1e-4, "newton {} grid {}", beta[0], best);
    }

    #[test]
    fn duplicated_rows_leave_unpenalised_fit_unchanged() {
        let data = synthetic(150, &[0.6, -0.3], 3);
        let mut doubled = data.clone();
        doubled.x.extend(data.x.iter());
        doubled.time.extend(data.time.iter());
        doubled.status.extend(data.status.iter());
        let (a, _) = newton_solve(&data, 0.0).unwrap();
        let (b, _) = newton_solve(&doubled, 0.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn newton_steps_never_decrease_objective() {
        let data = synthetic(300, &[1.0, -1.0, 0.5], 4);
        let order = data.order_desc();
        let mut beta = vec![0.0; 3];
        let mut prev = penalized_loglik(&data, &order, &beta, 0.1, false).value;
        for _ in 0..5 {
            let d = penalized_loglik(&data, &order, &beta, 0.1, true);
            let step = (-&d.hess).cholesky().unwrap().solve(&d.grad);
            let mut s = 1.0;
            loop {
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, st)| b + s * st).collect();
                let v = penalized_loglik(&data, &order, &trial, 0.1, false).value;
                if v >= prev {
                    beta = trial;
                    prev = v;
                    break;
                }
                s *= 0.5;
            }
        }
        let (solved, _) = newton_solve(&data, 0.1).unwrap();
        assert!(penalized_loglik(&data, &order, &solved, 0.1, false).value >= prev - 1e-9);
    }

    #[test]
    fn no_events_is_an_error() {
        let data = SurvivalData::new(1, vec![0.0, 1.0], vec![1.0, 2.0], vec![false, false]).unwrap();
        assert!(matches!(fit_cox_ridge(&data, 0.1, &[]), Err(Error::UnfitModel(_))));
    }

    #[test]
    fn prediction_shape() {
        let data = synthetic(100, &[0.5], 5);
        let m = fit_cox_ridge(&data, 0.01, &[]).unwrap();
        let s = m.predict_survival(&[0.0]).unwrap();
        assert_eq!(s.eval(0.0), 1.0);
        assert_eq!(s.horizon(), data.max_time());
        assert!(m.predict_survival(&[0.0, 1.0]).is_err());
    }
}
