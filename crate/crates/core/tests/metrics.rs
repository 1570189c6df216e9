use pcmvt_core::explain::{Factor, FactorTable};
use pcmvt_core::metrics::*;
use pcmvt_core::seed::rng_from_seed;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// AUC by counting every positive-negative pair, ties scoring one half.
fn pair_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if truth[i] && !truth[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[test]
fn six_point_example() {
    let scores = [0.9, 0.8, 0.7, 0.6, 0.55, 0.4];
    let truth = [true, false, true, true, false, false];
    let auc = roc_auc(&scores, &truth).unwrap().auc;
    assert_eq!(auc, 7.0 / 9.0);
    assert_eq!(auc, pair_auc(&scores, &truth));
}

#[test]
fn perfectly_separated_scores() {
    let roc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
    assert_eq!(roc.auc, 1.0);
}

#[test]
fn uninformative_scores_give_half() {
    let mut rng = rng_from_seed(21);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let truth: Vec<bool> = (0..10_000).map(|_| rng.gen_bool(0.3)).collect();
    let auc = roc_auc(&scores, &truth).unwrap().auc;
    assert!((0.48..=0.52).contains(&auc), "{auc}");
}

fn signal_sample(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = rng_from_seed(seed);
    let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    let scores = truth
        .iter()
        .map(|&t| {
            let e: f64 = StandardNormal.sample(&mut rng);
            f64::from(u8::from(t)) + e
        })
        .collect();
    (scores, truth)
}

#[test]
fn band_narrows_with_sample_size() {
    let mut shrinking = 0;
    for seed in 0..10 {
        let (s, t) = signal_sample(1600, seed);
        let small = fixed_width_bands(&s[..100], &t[..100], None, 0.95, 100, seed).unwrap();
        let large = fixed_width_bands(&s, &t, None, 0.95, 100, seed).unwrap();
        if large <= small {
            shrinking += 1;
        }
    }
    assert!(shrinking > 5, "{shrinking}/10");
}

#[test]
fn higher_level_gives_wider_band() {
    let (s, t) = signal_sample(300, 4);
    let dev = bootstrap_deviations(&s, &t, None, 200, 4).unwrap();
    assert!(band_from_deviations(&dev, 0.95) >= band_from_deviations(&dev, 0.80));
    assert!(dev.iter().all(|d| (0.0..=1.0).contains(d)));
}

#[test]
fn grouped_bootstrap_is_reproducible() {
    let (s, t) = signal_sample(200, 8);
    let groups: Vec<usize> = (0..200).map(|i| i / 4).collect();
    let a = fixed_width_bands(&s, &t, Some(&groups), 0.95, 50, 3).unwrap();
    let b = fixed_width_bands(&s, &t, Some(&groups), 0.95, 50, 3).unwrap();
    assert_eq!(a, b);
}

fn table(entries: &[(&str, f64)]) -> FactorTable {
    let factors = entries
        .iter()
        .enumerate()
        .map(|(k, &(c, b))| Factor { covariate: c.into(), mean_log_hr: b, hr: b.exp(), rank: k + 1 })
        .collect();
    FactorTable { factors, n_explanations: 1 }
}

#[test]
fn top_two_characterisation() {
    let d = ["X1", "X2"];
    let both = characterisation(&table(&[("X1", 0.4), ("X2", -0.2), ("X7", 0.1)]), &d).unwrap();
    assert_eq!(both.top2_count, 2);
    assert!((both.mean_abs_log_hr_top2 - 0.3).abs() < 1e-15);
    let none = characterisation(&table(&[("X7", 0.4), ("X3", 0.3), ("X1", 0.1)]), &d).unwrap();
    assert_eq!(none.top2_count, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_equals_pair_counting(data in proptest::collection::vec((0u8..6, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0)).collect();
        let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
        let auc = roc_auc(&scores, &truth).unwrap().auc;
        prop_assert!((auc - pair_auc(&scores, &truth)).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_increasing_transforms(data in proptest::collection::vec((-3.0f64..3.0, any::<bool>()), 2..80)) {
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
        let base = roc_auc(&scores, &truth).unwrap();
        for f in [|x: f64| x.exp(), |x: f64| x * x * x + 3.0 * x, |x: f64| (x / 2.0).tanh()] {
            let moved: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(roc_auc(&moved, &truth).unwrap().auc, base.auc);
        }
    }

    #[test]
    fn roc_runs_monotonically_corner_to_corner(data in proptest::collection::vec((0u8..10, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0)).collect();
        let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
        let roc = roc_auc(&scores, &truth).unwrap();
        prop_assert_eq!(roc.points[0], (0.0, 0.0));
        prop_assert_eq!(*roc.points.last().unwrap(), (1.0, 1.0));
        prop_assert!(roc.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }
}
