use proptest::prelude::*;

use dynatreat::arrivals::{ForecastEnsemble, RateCoef, RateModel};
use dynatreat::env::{EnvConfig, Environment, Population};
use dynatreat::eval::{compare, evaluate_welfare, selectivity_stats};
use dynatreat::policy::{ConstantPolicy, FeatureSpec, FeatureTerm, PolicyParams};
use dynatreat::reward::RewardTable;

fn environment(z0: f64, b_n: f64, cost: f64) -> Environment {
    let pop = Population::new(vec![-1.0, 0.3, 1.2, 2.0], 1, RewardTable::new(vec![-0.3, 0.8, 1.5, 0.4]), vec![vec![0, 1], vec![2, 3]]).unwrap();
    let model = RateModel::from_coefs(vec![RateCoef { b0: -0.7, b1: 0.5, b2: 0.0 }, RateCoef { b0: -0.7, b1: -0.5, b2: 0.2 }]).normalized_at(0.0);
    Environment::new(EnvConfig::dirichlet(z0, 1.0, 0.2, b_n, cost), pop, ForecastEnsemble::single(model)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn self_comparison_is_exactly_zero(theta in prop::collection::vec(-2.0f64..2.0, 3), seed in any::<u64>(), episodes in 1usize..60) {
        let p = PolicyParams::new(FeatureSpec::new(vec![FeatureTerm::Constant, FeatureTerm::Covariate(0), FeatureTerm::CovariateBudget(0)]), theta).unwrap();
        let env = environment(0.4, 30.0, 0.05);
        let c = compare(&p, &p, &env, episodes, seed).unwrap();
        prop_assert_eq!(c.difference, 0.0);
        prop_assert_eq!(c.ci_halfwidth, 0.0);
        prop_assert_eq!(c.mean_a, c.mean_b);
    }

    #[test]
    fn random_policy_has_relative_welfare_one(seed in any::<u64>(), episodes in 2usize..60) {
        let r = evaluate_welfare(&ConstantPolicy(0.5), &environment(0.4, 30.0, 0.05), episodes, seed).unwrap();
        if r.random_welfare != 0.0 {
            prop_assert_eq!(r.relative_welfare, Some(1.0));
        }
        prop_assert!(r.ci_halfwidth >= 0.0);
        prop_assert!((0.0..=1.0).contains(&r.treatment_share));
        prop_assert_eq!(r.episodes, episodes);
        prop_assert_eq!(r.per_episode.len(), episodes);
    }

    #[test]
    fn selectivity_bins_partition_events(p in 0.05f64..1.0, seed in any::<u64>()) {
        let s = selectivity_stats(&ConstantPolicy(p), &environment(0.5, 40.0, 0.05), 20, seed).unwrap();
        prop_assert_eq!(s.month_events.iter().sum::<u64>(), s.events);
        prop_assert_eq!(s.decile_events.iter().sum::<u64>(), s.events);
        prop_assert!(s.by_month.iter().chain(&s.by_budget_decile).flatten().all(|v| *v >= 0.0));
    }
}

#[test]
fn constant_policy_rejections_are_geometric() {
    // With ample budget, rejections before a treatment at π = 1/3 are
    // geometric with mean (1 − π)/π = 2.
    let env = environment(1.0, 2_000.0, 1e-4);
    let s = selectivity_stats(&ConstantPolicy(1.0 / 3.0), &env, 100, 8).unwrap();
    let total: f64 = s.by_month.iter().zip(&s.month_events).map(|(m, &n)| m.unwrap_or(0.0) * n as f64).sum();
    let mean = total / s.events as f64;
    let se = (2.0f64 / 3.0).sqrt() * 3.0 / (s.events as f64).sqrt();
    assert!(s.events > 50_000, "{} events", s.events);
    assert!((mean - 2.0).abs() < 4.0 * se, "mean {mean} se {se}");
}
