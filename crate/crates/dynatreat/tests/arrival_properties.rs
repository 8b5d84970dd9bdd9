use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dynatreat::arrivals::{aggregate_rate, cluster_covariates, covariate_weights, sample_arrival, RateCoef, RateModel};
use dynatreat::data::ObservationalData;
use dynatreat::rng::substream;

fn coef() -> impl Strategy<Value = RateCoef> {
    (-2.0f64..2.0, -1.5f64..1.5, -1.5f64..1.5).prop_map(|(b0, b1, b2)| RateCoef { b0, b1, b2 })
}

fn model() -> impl Strategy<Value = RateModel> {
    prop::collection::vec(coef(), 1..6).prop_map(RateModel::from_coefs)
}

/// Arrivals in `[0, 1]` at scale `b_n`, counting only uncensored jumps.
fn count_arrivals(m: &RateModel, b_n: f64, seed: u64) -> u64 {
    let mut rng = substream(seed, "arrivals", 0);
    let (mut t, mut n) = (0.0, 0);
    loop {
        let a = sample_arrival(m, t, b_n, Some(1.0), &mut rng);
        if a.censored {
            return n;
        }
        t += a.dt;
        n += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cluster_probabilities_sum_to_one(m in model(), t in -3.0f64..3.0) {
        let w = covariate_weights(&m, t);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|p| *p > 0.0));
    }

    #[test]
    fn rates_are_periodic(m in model(), k in 0u32..(1 << 20)) {
        // Dyadic times keep t + 1 exact, so the comparison can be bitwise.
        let t = k as f64 / (1u64 << 20) as f64;
        for c in 0..m.k() {
            prop_assert_eq!(m.cluster_rate(c, t).to_bits(), m.cluster_rate(c, t + 1.0).to_bits());
        }
        prop_assert!(aggregate_rate(&m, t) > 0.0);
    }

    #[test]
    fn k_median_objective_never_increases(n in 10usize..80, d in 1usize..4, k in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * d).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        let data = ObservationalData::new(x, d, vec![0.0; n], (0..n).map(|i| i % 2 == 0).collect()).unwrap();
        let a = cluster_covariates(&data, k, &mut rng).unwrap();
        prop_assert!(!a.objective_history.is_empty());
        for w in a.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "objective rose: {:?}", a.objective_history);
        }
        let members = a.members();
        prop_assert!(members.iter().all(|m| !m.is_empty()));
        prop_assert_eq!(members.iter().map(Vec::len).sum::<usize>(), n);
    }
}

#[test]
fn arrival_counts_match_integrated_rate() {
    let m = RateModel::from_coefs(vec![RateCoef { b0: -0.2, b1: 0.8, b2: -0.3 }, RateCoef { b0: -1.0, b1: -0.5, b2: 0.6 }]);
    let b_n = 150.0;
    let expected = b_n * m.integral(0.0, 1.0, 10_000);
    let counts: Vec<f64> = (0..200).map(|r| count_arrivals(&m, b_n, r) as f64).collect();
    let mean = counts.iter().sum::<f64>() / 200.0;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 199.0;
    let se = (var / 200.0).sqrt();
    assert!((mean - expected).abs() < 3.0 * se, "mean {mean} expected {expected} se {se}");
}
