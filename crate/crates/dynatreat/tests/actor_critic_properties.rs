use proptest::prelude::*;

use dynatreat::actor_critic::{ac_step, train_a3c, SharingMode, TrainConfig, TrainStatus};
use dynatreat::dp::{td_fixed_point, TinyInstance, TinyType};
use dynatreat::env::{Environment, StepDraws};
use dynatreat::eval::evaluate_welfare;
use dynatreat::policy::{FeatureSpec, FeatureTerm, PolicyParams};
use dynatreat::rng::substream;
use dynatreat::value::{BasisSpec, BasisTerm, TimeFactor, ValueWeights};
use dynatreat::Error;

fn spec() -> FeatureSpec {
    FeatureSpec::new(vec![FeatureTerm::Constant, FeatureTerm::Covariate(0), FeatureTerm::CovariateBudget(0)])
}

fn small_basis() -> BasisSpec {
    BasisSpec::new(vec![BasisTerm::new(1, TimeFactor::OneMinusT(1)), BasisTerm::new(2, TimeFactor::OneMinusT(1)), BasisTerm::new(1, TimeFactor::SinPi(1))]).unwrap()
}

fn three_types() -> TinyInstance {
    TinyInstance {
        types: vec![
            TinyType { x: vec![-1.0], reward: -0.4 },
            TinyType { x: vec![0.2], reward: 0.7 },
            TinyType { x: vec![1.1], reward: 1.6 },
        ],
        b_n: 12.0,
        beta: 0.3,
        cost: 0.25,
        z0: 0.75,
        epochs: 12,
    }
}

/// One harmful and one helpful type, budget for two treatments.
fn two_types() -> Environment {
    TinyInstance {
        types: vec![TinyType { x: vec![-1.0], reward: -0.5 }, TinyType { x: vec![1.0], reward: 1.0 }],
        b_n: 20.0,
        beta: 0.3,
        cost: 0.25,
        z0: 0.5,
        epochs: 20,
    }
    .environment()
    .unwrap()
}

fn single_writer(alpha_theta: f64, alpha_v: f64, batch: usize, workers: usize, updates: u64, seed: u64) -> TrainConfig {
    TrainConfig { mode: SharingMode::SingleWriter, ..TrainConfig::new(alpha_theta, alpha_v, batch, workers, updates, seed) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn batch_update_is_mean_of_step_terms(batch in 1usize..12, seed in any::<u64>(), theta in prop::collection::vec(-1.0f64..1.0, 3)) {
        let env = three_types().environment().unwrap();
        let p = PolicyParams::new(spec(), theta).unwrap();
        let w = ValueWeights::zeros(BasisSpec::appendix_e9());
        let cfg = TrainConfig { trace: true, ..single_writer(0.7, 0.3, batch, 1, 6, seed) };
        let out = train_a3c(&env, p.clone(), w.clone(), &cfg).unwrap();
        let trace = out.trace.unwrap();
        let b = batch as f64;
        let mut steps = trace.steps.iter();
        for u in &trace.updates {
            let terms: Vec<_> = steps.by_ref().take(u.steps).collect();
            for k in 0..p.theta.len() {
                let sum = terms.iter().fold(0.0, |a, s| a + s.policy_term[k]);
                prop_assert_eq!(u.theta_after[k].to_bits(), (u.theta_before[k] + sum / b).to_bits());
            }
            for k in 0..w.nu.len() {
                let sum = terms.iter().fold(0.0, |a, s| a + s.value_term[k]);
                prop_assert_eq!(u.nu_after[k].to_bits(), (u.nu_before[k] + sum / b).to_bits());
            }
        }

        // The first batch's terms are the single-step terms at the initial parameters.
        let mut rng = substream(seed, "worker", 0);
        let mut s = env.reset(&mut rng);
        let (mut g, mut phi) = (vec![0.0; 3], vec![0.0; 9]);
        for rec in trace.steps.iter().take(trace.updates[0].steps) {
            let d = StepDraws::draw(&mut rng);
            let st = ac_step(&env, &p, &w, &s, &d, &mut g, &mut phi).unwrap();
            for (a, e) in rec.policy_term.iter().zip(&g) {
                prop_assert_eq!(a.to_bits(), (0.7 * e).to_bits());
            }
            for (a, e) in rec.value_term.iter().zip(&phi) {
                prop_assert_eq!(a.to_bits(), (0.3 * e).to_bits());
            }
            s = st.transition.next;
        }
    }
}

#[test]
fn frozen_policy_critic_reaches_td_fixed_point() {
    let inst = three_types();
    let env = inst.environment().unwrap();
    let p = PolicyParams::new(spec(), vec![-0.3, 1.2, 0.8]).unwrap();
    let oracle = td_fixed_point(&env, &p, &small_basis()).unwrap();
    let mut w = ValueWeights::zeros(small_basis());
    // Shrinking steps trade speed for noise.
    for (alpha_v, updates) in [(2.0, 40_000), (0.2, 100_000), (0.05, 200_000), (0.01, 400_000)] {
        let out = train_a3c(&env, p.clone(), w, &single_writer(0.0, alpha_v, 64, 1, updates, 7)).unwrap();
        assert_eq!(out.params.theta, p.theta);
        w = out.weights;
    }
    let mut worst = 0.0_f64;
    for j in 0..inst.epochs {
        for l in 1..=3 {
            let (z, t) = (l as f64 * inst.cost, j as f64 / inst.b_n);
            worst = worst.max((w.predict(z, t) - oracle.predict(z, t)).abs());
        }
    }
    assert!(worst < 1e-3, "critic differs from the fixed point by {worst}");
}

#[test]
fn training_improves_on_the_initial_policy() {
    let env = two_types();
    let spec = FeatureSpec::new(vec![FeatureTerm::Constant, FeatureTerm::Covariate(0)]);
    let start = PolicyParams::zeros(spec);
    let mut improved = 0;
    for seed in 0..20 {
        let out = train_a3c(&env, start.clone(), ValueWeights::zeros(BasisSpec::appendix_e9()), &single_writer(2.0, 0.5, 8, 1, 2_000, seed)).unwrap();
        let eval_seed = 1_000 + seed;
        let before = evaluate_welfare(&start, &env, 500, eval_seed).unwrap().mean_welfare;
        let after = evaluate_welfare(&out.params, &env, 500, eval_seed).unwrap().mean_welfare;
        improved += usize::from(after > before);
    }
    assert!(improved >= 19, "improved in {improved}/20 runs");
}

#[test]
fn single_writer_is_bitwise_reproducible() {
    let env = three_types().environment().unwrap();
    let run = || {
        let cfg = TrainConfig { eval_every: 100, eval_episodes: 50, ..single_writer(1.0, 0.3, 16, 3, 400, 42) };
        train_a3c(&env, PolicyParams::zeros(spec()), ValueWeights::zeros(BasisSpec::appendix_e9()), &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.params.theta), bits(&b.params.theta));
    assert_eq!(bits(&a.weights.nu), bits(&b.weights.nu));
    assert_eq!(a.curve, b.curve);
    assert_eq!((a.updates, a.episodes), (b.updates, b.episodes));
}

#[test]
fn divergence_halts_within_one_update() {
    let env = three_types().environment().unwrap();
    let init = || (PolicyParams::zeros(spec()), ValueWeights::zeros(BasisSpec::appendix_e9()));
    // Find the first update whose θ norm passes a small threshold.
    let threshold = 3.0;
    let (p, w) = init();
    let free = train_a3c(&env, p, w, &TrainConfig { trace: true, ..single_writer(5.0, 0.3, 4, 2, 300, 3) }).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let first = free.trace.unwrap().updates.iter().position(|u| norm(&u.theta_after) > threshold).expect("threshold is crossed") as u64 + 1;
    let (p, w) = init();
    let cfg = TrainConfig { divergence_threshold: threshold, ..single_writer(5.0, 0.3, 4, 2, 300, 3) };
    let out = train_a3c(&env, p, w, &cfg).unwrap();
    assert!(matches!(out.status, TrainStatus::Diverged { update, .. } if update == first), "{:?} vs first crossing {first}", out.status);
    assert_eq!(out.updates, first);
    assert!(norm(&out.params.theta) <= threshold);

    // Overflowing steps stop every sharing mode with an error or a divergence status.
    for mode in [SharingMode::SingleWriter, SharingMode::LockPerBatch, SharingMode::Hogwild] {
        let (p, w) = init();
        let cfg = TrainConfig { mode, ..TrainConfig::new(1e308, 1e308, 4, 2, 50, 5) };
        match train_a3c(&env, p, w, &cfg) {
            Ok(out) => {
                assert!(matches!(out.status, TrainStatus::Diverged { update, .. } if update <= 2), "{mode:?}: {:?}", out.status);
                assert!(out.params.theta.iter().all(|v| v.is_finite()));
            }
            Err(e) => assert!(matches!(e, Error::NonFinite(_) | Error::Divergence { .. }), "{mode:?}: {e}"),
        }
    }
}
