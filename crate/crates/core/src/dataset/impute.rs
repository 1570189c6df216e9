use rand::Rng;

use super::LongitudinalTrial;
use crate::error::{Error, Result};

pub fn has_missing(trial: &LongitudinalTrial) -> bool {
    trial.patients.iter().flat_map(|p| p.visits.iter()).any(|v| v.values.iter().any(Option::is_none))
}

/// Last observation carried forward within each patient. Leading gaps stay
/// missing.
pub fn carry_forward_impute(trial: &LongitudinalTrial) -> LongitudinalTrial {
    let mut out = trial.clone();
    let p = out.n_covariates();
    for pat in &mut out.patients {
        let mut last: Vec<Option<f64>> = vec![None; p];
        for visit in &mut pat.visits {
            for (j, cell) in visit.values.iter_mut().enumerate() {
                match cell {
                    Some(v) => last[j] = Some(*v),
                    None => *cell = last[j],
                }
            }
        }
    }
    out
}

/// Hot-deck multiple imputation of leading (baseline) gaps.
///
/// Each missing baseline cell is filled with a value drawn uniformly from the
/// observed baseline values of the same covariate across patients (falling
/// back to all observed values when no baseline is observed), then carried
/// forward through the rest of the leading gap.
pub fn multiple_impute_baseline<R: Rng + ?Sized>(
    trial: &LongitudinalTrial,
    m: usize,
    rng: &mut R,
) -> Result<Vec<LongitudinalTrial>> {
    if m == 0 {
        return Err(Error::Configuration("number of imputations must be positive".into()));
    }
    let base = carry_forward_impute(trial);
    let p = base.n_covariates();

    let needs: Vec<bool> =
        (0..p).map(|j| base.patients.iter().any(|pat| pat.visits.iter().any(|v| v.values[j].is_none()))).collect();
    let mut donors: Vec<Vec<f64>> = vec![Vec::new(); p];
    for j in (0..p).filter(|&j| needs[j]) {
        let baseline: Vec<f64> = base.patients.iter().filter_map(|pat| pat.visits[0].values[j]).collect();
        donors[j] = if baseline.is_empty() { base.observed_values(j).collect() } else { baseline };
        if donors[j].is_empty() {
            return Err(Error::UnimputableCovariate(base.covariates[j].name.clone()));
        }
    }

    let mut copies = Vec::with_capacity(m);
    for _ in 0..m {
        let mut copy = base.clone();
        for pat in &mut copy.patients {
            for j in (0..p).filter(|&j| needs[j]) {
                if pat.visits[0].values[j].is_none() {
                    let pool = &donors[j];
                    pat.visits[0].values[j] = Some(pool[rng.gen_range(0..pool.len())]);
                }
            }
        }
        copies.push(carry_forward_impute(&copy));
    }
    Ok(copies)
}

#[cfg(test)]
mod tests {
    use super::super::tests::patient;
    use super::super::Covariate;
    use super::*;
    use crate::seed::rng_from_seed;

    fn single(values: Vec<Option<f64>>) -> LongitudinalTrial {
        let visits = values.into_iter().enumerate().map(|(k, v)| (k as f64, vec![v])).collect();
        LongitudinalTrial {
            covariates: vec![Covariate::continuous("x")],
            patients: vec![patient("p", 0, 10.0, true, visits)],
        }
    }

    fn column(trial: &LongitudinalTrial, k: usize) -> Vec<Option<f64>> {
        trial.patients[k].visits.iter().map(|v| v.values[0]).collect()
    }

    #[test]
    fn carries_last_value_forward() {
        let out = carry_forward_impute(&single(vec![Some(1.0), None, None]));
        assert_eq!(column(&out, 0), vec![Some(1.0); 3]);
    }

    #[test]
    fn leading_gap_preserved() {
        let out = carry_forward_impute(&single(vec![None, Some(2.0), None]));
        assert_eq!(column(&out, 0), vec![None, Some(2.0), Some(2.0)]);
    }

    #[test]
    fn complete_trial_unchanged() {
        let t = single(vec![Some(1.0), Some(3.0)]);
        assert_eq!(carry_forward_impute(&t), t);
    }

    #[test]
    fn degenerate_donor_pool() {
        let mut t = single(vec![None, None]);
        for k in 0..3 {
            t.patients.push(patient(&format!("d{k}"), 1, 5.0, true, vec![(0.0, vec![Some(3.2)])]));
        }
        let mut rng = rng_from_seed(1);
        let out = multiple_impute_baseline(&t, 1, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(column(&out[0], 0), vec![Some(3.2), Some(3.2)]);
    }

    #[test]
    fn no_missing_gives_identical_copies() {
        let t = single(vec![Some(1.0), Some(3.0)]);
        let out = multiple_impute_baseline(&t, 4, &mut rng_from_seed(2)).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|c| c == &t));
    }

    #[test]
    fn unobserved_covariate_is_an_error() {
        let t = single(vec![None, None]);
        let err = multiple_impute_baseline(&t, 2, &mut rng_from_seed(3)).unwrap_err();
        assert!(matches!(err, Error::UnimputableCovariate(ref n) if n == "x"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn filled_values_come_from_donors(
                cells in proptest::collection::vec(proptest::option::weighted(0.6, -5i32..5), 2..20),
                seed in any::<u64>(),
            ) {
                prop_assume!(cells.iter().any(Option::is_some));
                let patients = cells
                    .iter()
                    .enumerate()
                    .map(|(k, c)| patient(&format!("p{k}"), (k % 2) as u8, 3.0, true,
                        vec![(0.0, vec![c.map(f64::from)]), (1.0, vec![None])]))
                    .collect();
                let trial = LongitudinalTrial { covariates: vec![Covariate::continuous("x")], patients };
                let donors: Vec<f64> = cells.iter().flatten().map(|&c| f64::from(c)).collect();
                let out = multiple_impute_baseline(&trial, 3, &mut rng_from_seed(seed)).unwrap();
                for copy in &out {
                    for pat in &copy.patients {
                        for v in &pat.visits {
                            let x = v.values[0].unwrap();
                            prop_assert!(donors.contains(&x));
                        }
                    }
                }
            }
        }
    }
}
