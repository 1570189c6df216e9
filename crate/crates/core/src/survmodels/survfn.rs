use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-continuous step survival curve.
///
/// `S(t) = probs[k]` for `times[k] <= t < times[k + 1]`, and `S(t) = 1`
/// before the first knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalFunction {
    times: Vec<f64>,
    probs: Vec<f64>,
}

const PROB_SLACK: f64 = 1e-12;

impl SurvivalFunction {
    pub fn new(times: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if times.len() != probs.len() {
            return Err(Error::InvalidInput(format!(
                "survival function has {} knots but {} probabilities",
                times.len(),
                probs.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::InvalidInput("survival function has no knots".into()));
        }
        for w in times.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidInput("survival knots must be strictly ascending".into()));
            }
        }
        if !(times[0] >= 0.0) || !times.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidInput("survival knots must be finite and nonnegative".into()));
        }
        let mut prev = 1.0 + PROB_SLACK;
        for &p in &probs {
            if !(-PROB_SLACK..=1.0 + PROB_SLACK).contains(&p) {
                return Err(Error::InvalidInput(format!("survival probability {p} outside [0, 1]")));
            }
            if p > prev + PROB_SLACK {
                return Err(Error::InvalidInput("survival probabilities must be nonincreasing".into()));
            }
            prev = p;
        }
        let probs = probs.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Ok(Self { times, probs })
    }

    /// Builds `S = exp(-H)` from cumulative hazard values on the knots.
    pub fn from_cumulative_hazard(times: Vec<f64>, cumhaz: &[f64]) -> Result<Self> {
        let mut running: f64 = 0.0;
        let probs = cumhaz
            .iter()
            .map(|&h| {
                // enforce monotonicity against rounding in averaged hazards
                running = running.max(h.max(0.0));
                (-running).exp()
            })
            .collect();
        Self::new(times, probs)
    }

    pub(crate) fn from_parts_unchecked(times: Vec<f64>, probs: Vec<f64>) -> Self {
        debug_assert_eq!(times.len(), probs.len());
        Self { times, probs }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Last knot; the restricted-mean horizon.
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty by construction")
    }

    pub fn eval(&self, t: f64) -> f64 {
        // number of knots <= t
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.probs[k - 1]
        }
    }

    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        -self.eval(t).max(f64::MIN_POSITIVE).ln()
    }

    /// `∫_0^tau S(t) dt` for the step curve.
    pub fn restricted_mean(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let mut area = 0.0;
        let mut left = 0.0;
        let mut level = 1.0;
        for (&t, &p) in self.times.iter().zip(&self.probs) {
            if t >= tau {
                break;
            }
            area += level * (t - left);
            left = t;
            level = p;
        }
        area + level * (tau - left)
    }
}

/// Restricted mean survival time up to the curve's last knot.
pub fn expected_time(s: &SurvivalFunction) -> f64 {
    s.restricted_mean(s.horizon())
}
