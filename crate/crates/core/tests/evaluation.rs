mod common;

use pcmvt_core::dataset::PcmRow;
use pcmvt_core::evaluation::*;
use pcmvt_core::seed::rng_from_seed;
use pcmvt_core::survmodels::*;
use pcmvt_core::Result;
use proptest::prelude::*;
use rand::Rng;

/// Candidate that ignores the data and uses the generating coefficients.
#[derive(Clone)]
enum Planted {
    Spec(ModelSpec),
    Oracle,
}

impl Candidate for Planted {
    type Model = FittedModel;

    fn label(&self) -> String {
        match self {
            Planted::Spec(s) => s.label(),
            Planted::Oracle => "oracle".into(),
        }
    }

    fn family(&self) -> String {
        match self {
            Planted::Spec(s) => s.kind().to_string(),
            Planted::Oracle => "oracle".into(),
        }
    }

    fn fit(&self, data: &SurvivalData, passthrough: &[usize], seed: u64) -> Result<FittedModel> {
        match self {
            Planted::Spec(s) => s.fit(data, passthrough, seed),
            Planted::Oracle => {
                let beta = vec![common::BETA[0], common::BETA[1], common::BETA[2], 0.0];
                let eta: Vec<f64> =
                    (0..data.len()).map(|i| data.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum()).collect();
                let baseline = breslow(&data.time, &data.status, &eta);
                Ok(FittedModel::CoxRidge(CoxModel::from_parts(beta, baseline, TrainingSummary::of(data))))
            }
        }
    }
}

#[test]
fn ctd_matches_pair_enumeration() {
    assert_eq!(common::ctd_mismatches(100), 0);
}

#[test]
fn ctd_small_cases() {
    let hi = SurvivalFunction::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.9, 0.8]).unwrap();
    let lo = SurvivalFunction::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.5, 0.2]).unwrap();
    assert_eq!(ctd(&[lo.clone(), hi.clone()], &[(1.0, true), (2.0, true)]).unwrap(), 1.0);
    assert_eq!(ctd(&[hi.clone(), hi.clone(), hi.clone()], &[(1.0, true), (1.5, true), (2.0, false)]).unwrap(), 0.5);
    assert!(ctd(&[hi.clone(), lo], &[(1.0, false), (2.0, false)]).is_err());
}

#[test]
fn ctd_is_invariant_under_time_reparameterisation() {
    let g = |t: f64| t * t * t + t;
    for seed in 0..10 {
        let (curves, outcomes) = common::random_curves(40, 1000 + seed, false);
        let warped: Vec<SurvivalFunction> = curves
            .iter()
            .map(|c| SurvivalFunction::new(c.times().iter().map(|&t| g(t)).collect(), c.probs().to_vec()).unwrap())
            .collect();
        let wo: Vec<(f64, bool)> = outcomes.iter().map(|&(t, d)| (g(t), d)).collect();
        assert_eq!(ctd_counts(&curves, &outcomes).unwrap(), ctd_counts(&warped, &wo).unwrap());
    }
}

#[test]
fn reversed_risk_ordering_gives_complement() {
    let mut rng = rng_from_seed(3);
    let knots: Vec<f64> = (1..=50).map(|k| k as f64 * 0.1).collect();
    let base: Vec<f64> = knots.iter().map(|t| 0.2 * t).collect();
    let curve = |r: f64| {
        let h: Vec<f64> = base.iter().map(|b| b * r.exp()).collect();
        SurvivalFunction::from_cumulative_hazard(knots.clone(), &h).unwrap()
    };
    let risks: Vec<f64> = (0..60).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
    let outcomes: Vec<(f64, bool)> =
        (0..60).map(|i| (0.05 + i as f64 * 0.07 + rng.gen::<f64>() * 0.01, rng.gen_bool(0.8))).collect();
    let fwd: Vec<SurvivalFunction> = risks.iter().map(|&r| curve(r)).collect();
    let rev: Vec<SurvivalFunction> = risks.iter().map(|&r| curve(-r)).collect();
    let a = ctd(&fwd, &outcomes).unwrap();
    let b = ctd(&rev, &outcomes).unwrap();
    assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b}");
}

#[test]
fn combined_survival_two_landmarks_by_hand() {
    let s1 = SurvivalFunction::new(vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 0.8, 0.6, 0.5]).unwrap();
    let s2 = SurvivalFunction::new(vec![0.0, 0.5, 1.0, 4.0], vec![1.0, 0.9, 0.7, 0.4]).unwrap();
    let c = combined_survival(&[0.0, 2.0], &[s1.clone(), s2.clone()]).unwrap();
    // S(t) = S1(t) before 2, S1(2) * S2(t - 2) after
    for (t, want) in [(0.5, 1.0), (1.5, 0.8), (2.0, 0.6), (2.7, 0.6 * 0.9), (3.5, 0.6 * 0.7), (6.5, 0.6 * 0.4)] {
        assert!((c.eval(t) - want).abs() < 1e-12, "t={t}: {} vs {want}", c.eval(t));
    }
    let single = combined_survival(&[0.0], std::slice::from_ref(&s1)).unwrap();
    for t in [0.0, 0.5, 1.0, 2.5, 10.0] {
        assert_eq!(single.eval(t), s1.eval(t));
    }
    assert!(combined_survival(&[2.0, 0.0], &[s1, s2]).is_err());
}

#[test]
fn single_candidate_two_outer_folds() {
    let rows = common::cox_rows(120, 1);
    let report = nested_cv(&rows, &[ModelSpec::cox(0.1)], &CvPlan { outer_k: 2, inner_k: 2 }, 4).unwrap();
    assert_eq!(report.outer.len(), 2);
    assert_eq!(report.scores.iter().filter(|s| s.inner_fold.is_none()).count(), 2);
    assert!(report.scores.iter().all(|s| (0.0..=1.0).contains(&s.ctd)));
}

#[test]
fn planted_oracle_is_selected() {
    let mut wins = 0;
    for rep in 0..10 {
        let rows = common::cox_rows(150, 100 + rep);
        let candidates =
            vec![Planted::Spec(ModelSpec::cox(1e4)), Planted::Spec(ModelSpec::forest(10, 40)), Planted::Oracle];
        let report = nested_cv(&rows, &candidates, &CvPlan::default(), rep).unwrap();
        if report.winning_family == "oracle" {
            wins += 1;
        }
    }
    assert!(wins >= 9, "oracle won {wins}/10");
}

#[test]
fn permuted_labels_give_chance_concordance() {
    let m = common::permuted_label_mean_ctd(20);
    assert!((0.45..=0.55).contains(&m), "mean outer Ctd {m}");
}

#[test]
fn fold_without_events_is_a_plan_error() {
    let mut rows = common::cox_rows(40, 2);
    for r in rows.rows.iter_mut().skip(3) {
        r.status = false;
    }
    let err = nested_cv(&rows, &[ModelSpec::cox(0.1)], &CvPlan::default(), 0).unwrap_err();
    assert!(matches!(err, pcmvt_core::Error::Plan(_)), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn folds_partition_patients_and_balance_strata(n in 8usize..200, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let mut rows = common::cox_rows(n, seed % 1000);
        // several rows per patient for some patients
        let extra: Vec<PcmRow> = rows.rows.iter().step_by(3).map(|r| PcmRow { landmark: 0.1, residual_time: r.residual_time.max(0.2) - 0.1, ..r.clone() }).collect();
        rows.rows.extend(extra);
        let a = stratified_folds(&rows, k, seed).unwrap();
        prop_assert_eq!(a.patients.len(), n);
        let mut all: Vec<usize> = (0..k).flat_map(|f| a.members(f)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for s in 0..8 {
            let counts: Vec<usize> = (0..k)
                .map(|f| a.fold.iter().zip(&a.stratum).filter(|(&g, &t)| g == f && t == s).count())
                .collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "stratum {} counts {:?}", s, counts);
        }
    }

    #[test]
    fn combined_curves_are_valid(cuts in proptest::collection::vec(0.01f64..1.0, 1..5), drops in proptest::collection::vec(0.0f64..0.3, 20)) {
        let mut landmarks = vec![0.0];
        for c in &cuts {
            let last = *landmarks.last().unwrap();
            landmarks.push(last + c);
        }
        let curves: Vec<SurvivalFunction> = landmarks
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let mut p = 1.0;
                let probs: Vec<f64> = (0..5).map(|k| { p *= 1.0 - drops[(i * 5 + k) % drops.len()]; p }).collect();
                SurvivalFunction::new((0..5).map(|k| k as f64 * 0.4).collect(), probs).unwrap()
            })
            .collect();
        let c = combined_survival(&landmarks, &curves).unwrap();
        prop_assert!(c.probs().windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(c.times().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(c.probs().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
